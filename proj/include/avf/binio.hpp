// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace avf {

/// Little-endian binary writer/reader for the on-disk formats. Explicit
/// byte order keeps the file layouts platform-pinned.
class BinWriter {
public:
    explicit BinWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path);
    }

    void magic(const char tag[4]) { out_.write(tag, 4); }

    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        out_.write(reinterpret_cast<const char*>(b), 4);
    }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
        out_.write(reinterpret_cast<const char*>(b), 8);
    }

    void f64_array(const double* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f64(data[i]);
    }

    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void close() {
        out_.close();
        if (!out_) throw std::runtime_error("write failure on close");
    }

private:
    std::ofstream out_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw std::runtime_error("cannot open for reading: " + path);
    }

    void expect_magic(const char tag[4]) {
        char got[4];
        in_.read(got, 4);
        if (!in_ || std::memcmp(got, tag, 4) != 0) {
            throw std::runtime_error(path_ + ": bad magic, expected " + std::string(tag, 4));
        }
    }

    std::uint32_t u32() {
        unsigned char b[4];
        in_.read(reinterpret_cast<char*>(b), 4);
        check();
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }

    double f64() {
        unsigned char b[8];
        in_.read(reinterpret_cast<char*>(b), 8);
        check();
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::vector<double> f64_array(std::size_t n) {
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = f64();
        return out;
    }

    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        in_.read(s.data(), n);
        check();
        return s;
    }

private:
    void check() {
        if (!in_) throw std::runtime_error(path_ + ": truncated file");
    }
    std::ifstream in_;
    std::string path_;
};

} // namespace avf
