#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/tensor.hpp"

// TLKT1 named-tensor archive.
//
//   magic "TLKT1\n"
//   repeated records:
//     u32 LE  name length
//     bytes   utf-8 name
//     u32 LE  rank
//     u32 LE  dims[rank]
//     f32 LE  payload (row-major)
//
// Values are stored as f32; save(load(x)) is byte-identical.

namespace tlkit {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

using Checkpoint = std::vector<CheckpointEntry>;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    buf.append(b, 4);
}

inline void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

    bool at_end() const { return pos_ == size_; }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<std::uint8_t>(data_[pos_ + static_cast<std::size_t>(i)]);
        pos_ += 4;
        return v;
    }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(data_ + pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) {
        if (pos_ + n > size_) throw CheckpointError("truncated checkpoint record");
    }

    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr const char kCheckpointMagic[] = "TLKT1\n";

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string buf(kCheckpointMagic, 6);
    for (const CheckpointEntry& e : ckpt) {
        detail::put_u32(buf, static_cast<std::uint32_t>(e.name.size()));
        buf.append(e.name);
        detail::put_u32(buf, static_cast<std::uint32_t>(e.shape.size()));
        std::size_t n = 1;
        for (int d : e.shape) {
            detail::put_u32(buf, static_cast<std::uint32_t>(d));
            n *= static_cast<std::size_t>(d);
        }
        if (n != e.data.size()) {
            throw CheckpointError("entry '" + e.name + "' payload does not match shape");
        }
        for (float v : e.data) detail::put_f32(buf, v);
    }
    return buf;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 6 || bytes.compare(0, 6, kCheckpointMagic, 6) != 0) {
        throw CheckpointError("bad checkpoint magic (expected TLKT1)");
    }
    detail::ByteReader rd(bytes.data() + 6, bytes.size() - 6);
    Checkpoint ckpt;
    while (!rd.at_end()) {
        CheckpointEntry e;
        const std::uint32_t name_len = rd.u32();
        e.name = rd.bytes(name_len);
        const std::uint32_t rank = rd.u32();
        if (rank > 8) throw CheckpointError("entry '" + e.name + "' has implausible rank");
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = rd.u32();
            if (d == 0) throw CheckpointError("entry '" + e.name + "' has zero dimension");
            e.shape.push_back(static_cast<int>(d));
            n *= d;
        }
        e.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) e.data[i] = rd.f32();
        ckpt.push_back(std::move(e));
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    const std::string buf = serialize_checkpoint(ckpt);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

inline CheckpointEntry to_entry(const std::string& name, const Tensor& t) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.data.resize(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) e.data[i] = static_cast<float>(t.data()[i]);
    return e;
}

inline void entry_to_tensor(const CheckpointEntry& e, Tensor& t) {
    if (e.shape != t.shape()) {
        throw CheckpointError("entry '" + e.name + "' shape " + shape_str(e.shape) +
                              " does not match expected " + shape_str(t.shape()));
    }
    for (std::size_t i = 0; i < e.data.size(); ++i) t.data()[i] = static_cast<double>(e.data[i]);
}

}  // namespace tlkit
