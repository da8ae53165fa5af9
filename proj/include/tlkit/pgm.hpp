#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/model.hpp"

// Attention-map export as 8-bit binary PGM (P5), values round(w * 255).

namespace tlkit {

inline void write_pgm(const std::string& path, int width, int height,
                      std::span<const double> values01) {
    if (static_cast<std::size_t>(width) * height != values01.size()) {
        throw DimensionError("write_pgm: " + std::to_string(values01.size()) + " values for " +
                             std::to_string(width) + "x" + std::to_string(height));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "P5\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> bytes(values01.size());
    for (std::size_t i = 0; i < values01.size(); ++i) {
        const long v = std::lround(values01[i] * 255.0);
        bytes[i] = static_cast<unsigned char>(std::clamp(v, 0L, 255L));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

// Writes the first TokenLearner's maps for one sample: S files per frame,
// named attn_f<frame>_t<token>.pgm, each sized to the feature grid the
// module saw. Returns the number of files written.
inline int export_attention_maps(const Model& model, const Tensor& sample,
                                 const std::string& out_dir) {
    const ForwardTrace trace = model.attention_maps(sample);
    std::filesystem::create_directories(out_dir);
    const int gh = trace.tl_grid_h, gw = trace.tl_grid_w;
    int written = 0;
    for (std::size_t f = 0; f < trace.first_tl_maps.size(); ++f) {
        const Tensor& maps = trace.first_tl_maps[f];  // [gh*gw x S]
        const int s = maps.dim(1);
        std::vector<double> img(static_cast<std::size_t>(gh) * gw);
        for (int t = 0; t < s; ++t) {
            for (int p = 0; p < gh * gw; ++p) img[static_cast<std::size_t>(p)] = maps(p, t);
            write_pgm(out_dir + "/attn_f" + std::to_string(f) + "_t" + std::to_string(t) + ".pgm",
                      gw, gh, img);
            ++written;
        }
    }
    return written;
}

}  // namespace tlkit
