// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hdrvam/core.hpp"

namespace hdrvam {

// ---------------------------------------------------------------------------
// Little-endian byte packing. Serialization goes through these helpers so the
// on-disk layout does not depend on host endianness.
// ---------------------------------------------------------------------------

inline void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline void put_u16le(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

inline void put_f32le(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32le(out, bits);
}

class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, std::string source)
        : data_(data), size_(size), pos_(0), source_(std::move(source)) {}

    size_t remaining() const { return size_ - pos_; }
    size_t pos() const { return pos_; }

    void read(void* dst, size_t n, const char* what) {
        if (remaining() < n)
            throw FormatError(source_ + ": truncated while reading " + std::string(what));
        std::memcpy(dst, data_ + pos_, n);
        pos_ += n;
    }
    uint8_t u8(const char* what) {
        uint8_t v;
        read(&v, 1, what);
        return v;
    }
    uint16_t u16le(const char* what) {
        uint8_t b[2];
        read(b, 2, what);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
    uint32_t u32le(const char* what) {
        uint8_t b[4];
        read(b, 4, what);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
    float f32le(const char* what) {
        uint32_t bits = u32le(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    const std::string& source() const { return source_; }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_;
    std::string source_;
};

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    std::streamoff len = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(len));
    if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!in) throw IoError("failed reading " + path);
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// TNS: raw tensor container.
//   magic "TNS1" | rank u8 | rank x extent u32le | payload real32le row-major
// ---------------------------------------------------------------------------

inline constexpr char kTnsMagic[4] = {'T', 'N', 'S', '1'};

inline std::vector<uint8_t> encode_tns(const Tensor<float>& t) {
    std::vector<uint8_t> out;
    out.reserve(5 + 4 * static_cast<size_t>(t.rank()) + 4 * static_cast<size_t>(t.size()));
    out.insert(out.end(), kTnsMagic, kTnsMagic + 4);
    out.push_back(static_cast<uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32le(out, static_cast<uint32_t>(t.extent(i)));
    for (int64_t i = 0; i < t.size(); ++i) put_f32le(out, t[i]);
    return out;
}

inline Tensor<float> decode_tns(ByteReader& r) {
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kTnsMagic, 4) != 0)
        throw FormatError(r.source() + ": bad TNS magic");
    uint8_t rank = r.u8("rank");
    if (rank < 1 || rank > 4)
        throw FormatError(r.source() + ": invalid tensor rank " + std::to_string(rank));
    std::vector<int64_t> ext(rank);
    for (int i = 0; i < rank; ++i) {
        uint32_t e = r.u32le("extents");
        if (e == 0) throw FormatError(r.source() + ": zero extent on axis " + std::to_string(i));
        ext[static_cast<size_t>(i)] = e;
    }
    Shape shape = Shape::of(ext);
    Tensor<float> t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = r.f32le("payload");
    return t;
}

template <typename T>
void write_tns(const std::string& path, const Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
        write_file_bytes(path, encode_tns(t));
    } else {
        write_file_bytes(path, encode_tns(t.template cast<float>()));
    }
}

inline Tensor<float> read_tns(const std::string& path) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size(), path);
    Tensor<float> t = decode_tns(r);
    if (r.remaining() != 0)
        throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return t;
}

// ---------------------------------------------------------------------------
// PFM: Portable FloatMap, color variant.
//   "PF\n<W> <H>\n-1.0\n" then H rows bottom-to-top of W RGB triplets,
//   real32 little-endian. Only the little-endian scale -1.0 is supported.
// Pixels are carried as a [3,H,W] planar tensor.
// ---------------------------------------------------------------------------

inline std::vector<uint8_t> encode_pfm(const Tensor<float>& rgb) {
    if (rgb.rank() != 3 || rgb.extent(0) != 3)
        throw ShapeError("PFM payload must be [3,H,W], got " + rgb.shape().str());
    int64_t h = rgb.extent(1), w = rgb.extent(2);
    std::string header = "PF\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<size_t>(3 * h * w) * 4);
    for (int64_t row = h - 1; row >= 0; --row)
        for (int64_t col = 0; col < w; ++col)
            for (int64_t c = 0; c < 3; ++c) put_f32le(out, rgb.at(c, row, col));
    return out;
}

inline Tensor<float> decode_pfm(const std::vector<uint8_t>& bytes, const std::string& source) {
    ByteReader r(bytes.data(), bytes.size(), source);
    auto token = [&](const char* what) {
        std::string tok;
        uint8_t c = r.u8(what);
        while (c == ' ' || c == '\n' || c == '\r' || c == '\t') c = r.u8(what);
        while (c != ' ' && c != '\n' && c != '\r' && c != '\t') {
            tok.push_back(static_cast<char>(c));
            c = r.u8(what);
        }
        return tok;
    };
    std::string magic = token("magic");
    if (magic != "PF") throw FormatError(source + ": bad PFM magic '" + magic + "'");
    int64_t w, h;
    double scale;
    try {
        w = std::stoll(token("width"));
        h = std::stoll(token("height"));
        scale = std::stod(token("scale"));
    } catch (const std::exception&) {
        throw FormatError(source + ": malformed PFM header");
    }
    if (w <= 0 || h <= 0) throw FormatError(source + ": non-positive PFM dimensions");
    if (scale > 0) throw FormatError(source + ": big-endian PFM (positive scale) unsupported");
    Tensor<float> rgb(Shape{3, h, w});
    for (int64_t row = h - 1; row >= 0; --row)
        for (int64_t col = 0; col < w; ++col)
            for (int64_t c = 0; c < 3; ++c) rgb.at(c, row, col) = r.f32le("pixels");
    if (r.remaining() != 0)
        throw FormatError(source + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return rgb;
}

inline Tensor<float> read_pfm_tensor(const std::string& path) {
    return decode_pfm(read_file_bytes(path), path);
}

template <typename T>
void write_pfm_tensor(const std::string& path, const Tensor<T>& rgb) {
    if constexpr (std::is_same_v<T, float>) {
        write_file_bytes(path, encode_pfm(rgb));
    } else {
        write_file_bytes(path, encode_pfm(rgb.template cast<float>()));
    }
}

}  // namespace hdrvam
