// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary encoding helpers shared by the model and dataset
// file formats. Payload checksums are zlib CRC32.

#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <type_traits>
#include <string>
#include <string_view>
#include <vector>

#include "tgr/tensor.hpp"

namespace tgr::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept {
    uLong c = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <class T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        bytes(&v, sizeof(T));
    }
    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f64(double v) { put(v); }
    void f64s(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::size_t size() const noexcept { return buf_.size(); }
    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

    // CRC32 over bytes [from, end) appended as a u32 trailer.
    void seal(std::size_t from) {
        const auto c = crc32(std::span<const std::uint8_t>(buf_).subspan(from));
        u32(c);
    }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> buf, std::string what = "file")
        : buf_(buf), what_(std::move(what)) {}

    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, buf_.data() + off_, n);
        off_ += n;
    }
    template <class T>
    T get() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f64() { return get<double>(); }
    void f64s(std::span<double> out) { bytes(out.data(), out.size() * sizeof(double)); }
    std::string str() {
        const auto n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

    std::size_t offset() const noexcept { return off_; }
    std::size_t remaining() const noexcept { return buf_.size() - off_; }

    // Reads the u32 trailer and compares it with the CRC of [from, offset()).
    void verify_seal(std::size_t from) {
        const auto expect = crc32(buf_.subspan(from, off_ - from));
        const std::size_t at = off_;
        const auto got = u32();
        if (got != expect)
            throw ParseError(what_ + ": checksum mismatch at byte offset " + std::to_string(at));
        if (remaining() != 0)
            throw ParseError(what_ + ": trailing bytes after checksum at byte offset " + std::to_string(off_));
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError(what_ + ": " + msg + " at byte offset " + std::to_string(off_));
    }

private:
    void need(std::size_t n) const {
        if (n > remaining())
            throw ParseError(what_ + ": truncated, needed " + std::to_string(n) + " bytes at byte offset " +
                             std::to_string(off_) + " but only " + std::to_string(remaining()) + " remain");
    }

    std::span<const std::uint8_t> buf_;
    std::size_t off_ = 0;
    std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ParseError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + p.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + p.string());
}

inline std::uint32_t file_crc32(const std::filesystem::path& p) {
    const auto b = read_file(p);
    return crc32(b);
}

}  // namespace tgr::io
