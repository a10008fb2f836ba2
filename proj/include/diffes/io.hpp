#pragma once

// Little-endian binary streams and checksums shared by the on-disk formats
// (checkpoints, calibration sets, route databases, reference caches).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/crc.hpp>

#include "diffes/error.hpp"

namespace diffes::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw Error(ErrorKind::InvalidConfig, "cannot open " + path.string() + " for writing");
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    void put_array(std::span<const T> v) {
        out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
    }

    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void put_magic(const char (&magic)[9]) { out_.write(magic, 8); }

    void close() {
        out_.close();
        if (!out_) throw Error(ErrorKind::InvalidConfig, "failed writing " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw Error(ErrorKind::InvalidConfig, "cannot open " + path.string());
        size_ = std::filesystem::file_size(path);
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    T get() {
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        check();
        return v;
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    std::vector<T> get_array(std::size_t n) {
        const auto pos = static_cast<std::uintmax_t>(in_.tellg());
        if (n > (size_ - std::min(pos, size_)) / sizeof(T))
            throw Error(ErrorKind::CorruptFile, path_.string() + ": array length exceeds file size");
        std::vector<T> v(n);
        in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
        check();
        return v;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        if (n > (1u << 20)) throw Error(ErrorKind::CorruptFile, path_.string() + ": string length implausible");
        std::string s(n, '\0');
        in_.read(s.data(), n);
        check();
        return s;
    }

    void expect_magic(const char (&magic)[9]) {
        char buf[8];
        in_.read(buf, 8);
        check();
        if (std::memcmp(buf, magic, 8) != 0)
            throw Error(ErrorKind::CorruptFile, path_.string() + ": bad magic, expected " + std::string(magic, 8));
    }

private:
    void check() {
        if (!in_) throw Error(ErrorKind::CorruptFile, path_.string() + ": unexpected end of file");
    }

    std::filesystem::path path_;
    std::ifstream in_;
    std::uintmax_t size_ = 0;
};

inline std::uint32_t crc32(std::span<const std::byte> bytes, std::uint32_t seed = 0) {
    boost::crc_32_type crc;
    crc.process_bytes(&seed, sizeof(seed));
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

template <class T>
std::uint32_t crc32_of(std::span<const T> values, std::uint32_t seed = 0) {
    return crc32(std::as_bytes(values), seed);
}

inline std::uint32_t file_crc32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::InvalidConfig, "cannot open " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    boost::crc_32_type crc;
    crc.process_bytes(buf.data(), buf.size());
    return crc.checksum();
}

}  // namespace diffes::io
