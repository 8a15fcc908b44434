#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "ebr/common.hpp"

namespace ebr::io {

// Explicit little-endian encoding independent of host byte order.
class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}

    void bytes(std::string_view s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

    template <typename U>
    void uint(U v) {
        unsigned char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
        os_.write(reinterpret_cast<const char*>(buf), sizeof(U));
    }

    void u32(std::uint32_t v) { uint(v); }
    void u64(std::uint64_t v) { uint(v); }
    void i64(std::int64_t v) { uint(static_cast<std::uint64_t>(v)); }

    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        uint(bits);
    }

    void f32s(std::span<const float> vs) {
        for (float v : vs) f32(v);
    }

    // LEB128 unsigned varint.
    void varint(std::uint64_t v) {
        while (v >= 0x80) {
            os_.put(static_cast<char>((v & 0x7f) | 0x80));
            v >>= 7;
        }
        os_.put(static_cast<char>(v));
    }

    void zigzag(std::int64_t v) {
        varint((static_cast<std::uint64_t>(v) << 1) ^ static_cast<std::uint64_t>(v >> 63));
    }

    void string(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }

private:
    std::ostream& os_;
};

class Reader {
public:
    Reader(std::istream& is, std::string source) : is_(is), source_(std::move(source)) {}

    void expect_magic(std::string_view magic) {
        std::string got(magic.size(), '\0');
        is_.read(got.data(), static_cast<std::streamsize>(got.size()));
        if (!is_ || got != magic) throw InputError(source_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    }

    template <typename U>
    U uint() {
        unsigned char buf[sizeof(U)];
        read_raw(buf, sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
        return v;
    }

    std::uint32_t u32() { return uint<std::uint32_t>(); }
    std::uint64_t u64() { return uint<std::uint64_t>(); }
    std::int64_t i64() { return static_cast<std::int64_t>(uint<std::uint64_t>()); }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    void f32s(std::span<float> out) {
        for (float& v : out) v = f32();
    }

    std::uint64_t varint() {
        std::uint64_t v = 0;
        for (int shift = 0; shift < 64; shift += 7) {
            unsigned char b;
            read_raw(&b, 1);
            v |= static_cast<std::uint64_t>(b & 0x7f) << shift;
            if (!(b & 0x80)) return v;
        }
        throw InputError(source_ + ": malformed varint");
    }

    std::int64_t zigzag() {
        std::uint64_t u = varint();
        return static_cast<std::int64_t>((u >> 1) ^ (~(u & 1) + 1));
    }

    std::string string() {
        std::uint32_t n = u32();
        std::string s(n, '\0');
        read_raw(s.data(), n);
        return s;
    }

    bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

private:
    void read_raw(void* dst, std::size_t n) {
        is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) throw InputError(source_ + ": truncated file");
    }

    std::istream& is_;
    std::string source_;
};

} // namespace ebr::io
