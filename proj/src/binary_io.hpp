#pragma once

// Little-endian stream helpers shared by the PSDW / PSDD / PSDS formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "psd/error.hpp"

namespace psd::binio {

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void magic(const char (&tag)[5]) { out_.write(tag, 4); }

    template <typename T>
    void le(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        std::array<unsigned char, sizeof(T)> bytes;
        std::memcpy(bytes.data(), &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes.begin(), bytes.end());
        }
        out_.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
    }

    void u8(std::uint8_t v) { le(v); }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void f64(double v) { le(v); }

    void f64s(const std::vector<double>& values) {
        for (double v : values) {
            f64(v);
        }
    }

    void check(const std::string& what) const {
        require(static_cast<bool>(out_), ErrorCode::io, "write failed: " + what);
    }

private:
    std::ostream& out_;
};

class Reader {
public:
    Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

    void expect_magic(const char (&tag)[5]) {
        char got[4] = {};
        in_.read(got, 4);
        if (in_.gcount() != 4) {
            fail(ErrorCode::truncated, what_ + ": file too short for magic bytes");
        }
        if (std::memcmp(got, tag, 4) != 0) {
            fail(ErrorCode::bad_magic, what_ + ": bad magic bytes, expected '" +
                                           std::string(tag, 4) + "'");
        }
    }

    void expect_version(std::uint32_t expected) {
        const auto v = u32();
        if (v != expected) {
            fail(ErrorCode::version_mismatch, what_ + ": format version " + std::to_string(v) +
                                                  ", expected " + std::to_string(expected));
        }
    }

    template <typename T>
    T le() {
        std::array<unsigned char, sizeof(T)> bytes;
        in_.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
        if (in_.gcount() != static_cast<std::streamsize>(sizeof(T))) {
            fail(ErrorCode::truncated, what_ + ": unexpected end of file");
        }
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(bytes.begin(), bytes.end());
        }
        T value;
        std::memcpy(&value, bytes.data(), sizeof(T));
        return value;
    }

    std::uint8_t u8() { return le<std::uint8_t>(); }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    double f64() { return le<double>(); }

    /// Reads `count` doubles after confirming the stream still holds that many bytes.
    std::vector<double> f64s(std::uint64_t count) {
        require_remaining(count, sizeof(double));
        std::vector<double> out(count);
        for (auto& v : out) {
            v = f64();
        }
        return out;
    }

    void require_remaining(std::uint64_t count, std::uint64_t width) {
        const auto here = in_.tellg();
        in_.seekg(0, std::ios::end);
        const auto end = in_.tellg();
        in_.seekg(here);
        const auto left = static_cast<std::uint64_t>(end - here);
        if (width != 0 && count > left / width) {
            fail(ErrorCode::truncated, what_ + ": header declares " + std::to_string(count) +
                                           " entries but only " + std::to_string(left) +
                                           " bytes remain");
        }
    }

    void expect_end() {
        in_.peek();
        require(in_.eof(), ErrorCode::invalid_input, what_ + ": trailing bytes after payload");
    }

    const std::string& what() const noexcept { return what_; }

private:
    std::istream& in_;
    std::string what_;
};

} // namespace psd::binio
