// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmu/errors.hpp"

namespace dmu::io {

/// Little-endian primitive encoder.
class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    void magic(std::string_view m) { raw(m.data(), m.size()); }

    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }

    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }

private:
    template <class U>
    void le(U v) {
        std::array<char, sizeof(U)> b{};
        for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        raw(b.data(), b.size());
    }

    void raw(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!os_) throw IoError("write failed");
    }

    std::ostream& os_;
};

/// Little-endian primitive decoder; truncated input throws IoError.
class BinaryReader {
public:
    explicit BinaryReader(std::istream& is) : is_(is) {}

    void expect_magic(std::string_view m, std::string_view what) {
        std::string got(m.size(), '\0');
        raw(got.data(), got.size());
        if (got != m) throw IoError(std::string(what) + ": bad magic");
    }

    std::uint8_t u8() {
        std::uint8_t v = 0;
        raw(&v, 1);
        return v;
    }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }

    std::string str() {
        std::string s(u32(), '\0');
        raw(s.data(), s.size());
        return s;
    }

    void f64s(std::span<double> out) {
        for (double& x : out) x = f64();
    }

    /// Fails unless the stream is exhausted.
    void expect_end(std::string_view what) {
        if (is_.peek() != std::char_traits<char>::eof()) throw IoError(std::string(what) + ": trailing bytes");
    }

private:
    template <class U>
    U le() {
        std::array<unsigned char, sizeof(U)> b{};
        raw(b.data(), b.size());
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
        return v;
    }

    void raw(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) throw IoError("unexpected end of file");
    }

    std::istream& is_;
};

}  // namespace dmu::io
