#pragma once

#include "deeprhythm/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

// Little-endian scalar IO for the binary artifact formats.
namespace deeprhythm::binio {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw data_error("truncated " + what);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline float get_f32(std::istream& in, const std::string& what) {
    return std::bit_cast<float>(get_u32(in, what));
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
    const std::uint64_t lo = get_u32(in, what);
    return lo | static_cast<std::uint64_t>(get_u32(in, what)) << 32;
}

inline std::string get_string(std::istream& in, const std::string& what) {
    const std::uint32_t n = get_u32(in, what);
    if (n > (1u << 20)) throw data_error("corrupt " + what);
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw data_error("truncated " + what);
    return s;
}

inline void put_f32_array(std::ostream& out, const float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < n; ++i) put_f32(out, data[i]);
    }
}

inline void get_f32_array(std::istream& in, float* data, std::size_t n, const std::string& what) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)))) {
            throw data_error("truncated " + what);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = get_f32(in, what);
    }
}

inline void expect_magic(std::istream& in, const char (&magic)[5], const std::string& what) {
    char m[4];
    if (!in.read(m, 4) || std::memcmp(m, magic, 4) != 0) throw data_error(what + ": bad magic");
}

}  // namespace deeprhythm::binio
