#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"

// Synthetic desk-scale datasets and the TLDS1 record format:
//
//   magic "TLDS1"
//   u32 LE: count, T, H, W, C, K
//   per sample: f32 LE pixels (T*H*W*C, row-major THWC), u32 LE label
//
// Generators are deterministic given the seed and every label is derivable
// from the pixels by construction.

namespace tlkit {

enum class TaskKind { LocatePatch, CountBlobs, MovingBlobDirection };

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::LocatePatch;
    int image_size = 16;
    int classes = 4;  // locate-patch: 4 quadrants; moving-blob: 8 directions
    double noise = 0.1;
    std::uint64_t seed = 1;
};

struct Dataset {
    int frames = 1;
    int height = 0;
    int width = 0;
    int channels = 1;
    int classes = 0;
    std::vector<float> pixels;
    std::vector<std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }

    std::size_t sample_elems() const {
        return static_cast<std::size_t>(frames) * height * width * channels;
    }

    Tensor sample(std::size_t i) const {
        const std::size_t n = sample_elems();
        std::vector<double> v(n);
        const float* src = pixels.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) v[j] = static_cast<double>(src[j]);
        if (frames == 1) return Tensor({height, width, channels}, std::move(v));
        return Tensor({frames, height, width, channels}, std::move(v));
    }

    int label(std::size_t i) const { return static_cast<int>(labels[i]); }
};

namespace detail {

inline void draw_square(std::vector<float>& img, int h, int w, int y0, int x0, int side,
                        float value) {
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x)
            img[static_cast<std::size_t>(y) * w + x] += value;
}

}  // namespace detail

inline Dataset generate_dataset(const SyntheticTaskSpec& spec, int n) {
    if (n < 1) throw ConfigError("dataset size n must be >= 1, got " + std::to_string(n));
    if (spec.image_size < 8) throw ConfigError("image_size must be >= 8");
    if (spec.noise < 0.0) throw ConfigError("noise must be >= 0");

    Dataset ds;
    ds.height = spec.image_size;
    ds.width = spec.image_size;
    ds.channels = 1;
    Rng rng(spec.seed);

    switch (spec.kind) {
        case TaskKind::LocatePatch: {
            if (spec.classes != 4) {
                throw ConfigError("locate-patch classifies quadrants; classes must be 4, got " +
                                  std::to_string(spec.classes));
            }
            ds.frames = 1;
            ds.classes = 4;
            const int h = ds.height, w = ds.width;
            const int half_h = h / 2, half_w = w / 2;
            const int side = std::max(2, h / 4);
            for (int i = 0; i < n; ++i) {
                std::vector<float> img(static_cast<std::size_t>(h) * w, 0.0f);
                const int quadrant = rng.uniform_int(0, 3);
                const int qy = (quadrant / 2) * half_h;
                const int qx = (quadrant % 2) * half_w;
                const int y0 = qy + rng.uniform_int(0, half_h - side);
                const int x0 = qx + rng.uniform_int(0, half_w - side);
                detail::draw_square(img, h, w, y0, x0, side, 1.0f);
                for (float& p : img) p += static_cast<float>(rng.normal(0.0, spec.noise));
                ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
                ds.labels.push_back(static_cast<std::uint32_t>(quadrant));
            }
            break;
        }
        case TaskKind::CountBlobs: {
            if (spec.classes < 2) throw ConfigError("count-blobs needs classes >= 2");
            ds.frames = 1;
            ds.classes = spec.classes;
            const int h = ds.height, w = ds.width;
            const int side = 2;
            for (int i = 0; i < n; ++i) {
                std::vector<float> img(static_cast<std::size_t>(h) * w, 0.0f);
                const int count = rng.uniform_int(1, spec.classes);
                std::vector<std::pair<int, int>> placed;
                for (int b = 0; b < count; ++b) {
                    // Keep blobs disjoint with a 1px gap so they stay countable.
                    for (int attempt = 0; attempt < 200; ++attempt) {
                        const int y0 = rng.uniform_int(0, h - side);
                        const int x0 = rng.uniform_int(0, w - side);
                        bool ok = true;
                        for (auto [py, px] : placed) {
                            if (std::abs(py - y0) <= side && std::abs(px - x0) <= side) {
                                ok = false;
                                break;
                            }
                        }
                        if (ok) {
                            placed.emplace_back(y0, x0);
                            detail::draw_square(img, h, w, y0, x0, side, 1.0f);
                            break;
                        }
                    }
                }
                for (float& p : img) p += static_cast<float>(rng.normal(0.0, spec.noise));
                ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
                ds.labels.push_back(static_cast<std::uint32_t>(count - 1));
            }
            break;
        }
        case TaskKind::MovingBlobDirection: {
            if (spec.classes != 8) {
                throw ConfigError("moving-blob-direction uses 8 compass directions; classes must "
                                  "be 8, got " + std::to_string(spec.classes));
            }
            if (spec.image_size < 12) {
                throw ConfigError("moving-blob-direction needs image_size >= 12");
            }
            ds.frames = 8;
            ds.classes = 8;
            const int h = ds.height, w = ds.width, t = ds.frames;
            const int side = 3;
            static const int dirs[8][2] = {{0, 1},  {1, 1},   {1, 0},  {1, -1},
                                           {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}};
            for (int i = 0; i < n; ++i) {
                std::vector<float> vid(static_cast<std::size_t>(t) * h * w, 0.0f);
                const int dir = rng.uniform_int(0, 7);
                const double dy = dirs[dir][0], dx = dirs[dir][1];
                const double cy = h / 2.0 - 3.5 * dy - side / 2.0;
                const double cx = w / 2.0 - 3.5 * dx - side / 2.0;
                for (int f = 0; f < t; ++f) {
                    int y0 = static_cast<int>(std::lround(cy + f * dy));
                    int x0 = static_cast<int>(std::lround(cx + f * dx));
                    y0 = std::clamp(y0, 0, h - side);
                    x0 = std::clamp(x0, 0, w - side);
                    for (int y = y0; y < y0 + side; ++y)
                        for (int x = x0; x < x0 + side; ++x)
                            vid[(static_cast<std::size_t>(f) * h + y) * w + x] += 1.0f;
                }
                for (float& p : vid) p += static_cast<float>(rng.normal(0.0, spec.noise));
                ds.pixels.insert(ds.pixels.end(), vid.begin(), vid.end());
                ds.labels.push_back(static_cast<std::uint32_t>(dir));
            }
            break;
        }
    }
    return ds;
}

inline constexpr const char kDatasetMagic[] = "TLDS1";

namespace detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    f.write(b, 4);
}

inline std::uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw IoError("truncated dataset header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(kDatasetMagic, 5);
    detail::write_u32(f, static_cast<std::uint32_t>(ds.size()));
    detail::write_u32(f, static_cast<std::uint32_t>(ds.frames));
    detail::write_u32(f, static_cast<std::uint32_t>(ds.height));
    detail::write_u32(f, static_cast<std::uint32_t>(ds.width));
    detail::write_u32(f, static_cast<std::uint32_t>(ds.channels));
    detail::write_u32(f, static_cast<std::uint32_t>(ds.classes));
    const std::size_t n = ds.sample_elems();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* src = ds.pixels.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            std::uint32_t bits;
            std::memcpy(&bits, &src[j], 4);
            char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff),
                         static_cast<char>((bits >> 24) & 0xff)};
            f.write(b, 4);
        }
        detail::write_u32(f, ds.labels[i]);
    }
    if (!f) throw IoError("write failed for '" + path + "'");
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    char magic[5];
    f.read(magic, 5);
    if (!f || std::memcmp(magic, kDatasetMagic, 5) != 0) {
        throw IoError("bad dataset magic in '" + path + "' (expected TLDS1)");
    }
    Dataset ds;
    const std::uint32_t count = detail::read_u32(f);
    ds.frames = static_cast<int>(detail::read_u32(f));
    ds.height = static_cast<int>(detail::read_u32(f));
    ds.width = static_cast<int>(detail::read_u32(f));
    ds.channels = static_cast<int>(detail::read_u32(f));
    ds.classes = static_cast<int>(detail::read_u32(f));
    if (ds.frames < 1 || ds.height < 1 || ds.width < 1 || ds.channels < 1 || ds.classes < 1) {
        throw IoError("corrupt dataset header in '" + path + "'");
    }
    const std::size_t n = ds.sample_elems();
    ds.pixels.resize(count * n);
    ds.labels.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const std::uint32_t bits = detail::read_u32(f);
            float v;
            std::memcpy(&v, &bits, 4);
            ds.pixels[i * n + j] = v;
        }
        ds.labels[i] = detail::read_u32(f);
        if (ds.labels[i] >= static_cast<std::uint32_t>(ds.classes)) {
            throw IoError("label out of range in '" + path + "'");
        }
    }
    return ds;
}

}  // namespace tlkit
