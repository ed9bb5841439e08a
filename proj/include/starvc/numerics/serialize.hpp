#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <zlib.h>

#include "starvc/numerics/tensor.hpp"

namespace starvc::num {

/// Little-endian byte sink. Records: u32 name length, name bytes, u32 rank,
/// u32 dims, f32 payload.
class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void raw(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        bytes_.insert(bytes_.end(), c, c + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const std::string& name, const Tensor& t) {
        str(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) u32(static_cast<std::uint32_t>(d));
        for (float v : t.values()) f32(v);
    }

    const std::vector<char>& bytes() const noexcept { return bytes_; }
    std::vector<char>& bytes() noexcept { return bytes_; }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : p_(data), end_(data + size) {}
    explicit ByteReader(const std::vector<char>& v) : ByteReader(v.data(), v.size()) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p_[i])) << (8 * i);
        p_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(p_, n);
        p_ += n;
        return s;
    }
    std::string str() { return raw(u32()); }

    Tensor tensor(std::string& name) {
        name = str();
        const std::uint32_t rank = u32();
        if (rank > 8) throw FormatError("tensor record '" + name + "': implausible rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(u32()));
        const std::size_t n = shape_size(shape);
        need(n * 4);
        std::vector<float> data(n);
        for (auto& v : data) v = f32();
        return Tensor(std::move(shape), std::move(data));
    }

    std::size_t remaining() const noexcept { return static_cast<std::size_t>(end_ - p_); }
    bool done() const noexcept { return p_ == end_; }

private:
    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end_ - p_) < n) throw FormatError("truncated record stream");
    }
    const char* p_;
    const char* end_;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
    return static_cast<std::uint32_t>(
        ::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace starvc::num
