#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "ctdn/errors.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

// Payloads are raw little-endian float32; this codebase targets LE hosts.
static_assert(std::endian::native == std::endian::little, "big-endian hosts need byte swaps");

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + p.string());
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw IoError("short read: " + p.string());
    return buf;
}

inline void write_file_bytes(const std::filesystem::path& p, const void* data, size_t n) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f.write(reinterpret_cast<const char*>(data), std::streamsize(n));
    if (!f) throw IoError("short write: " + p.string());
}

inline void write_file_bytes(const std::filesystem::path& p, const std::vector<uint8_t>& bytes) {
    write_file_bytes(p, bytes.data(), bytes.size());
}

inline std::vector<uint8_t> tensor_bytes(const Tensor& t) {
    std::vector<uint8_t> out(t.v.size() * sizeof(float));
    std::memcpy(out.data(), t.v.data(), out.size());
    return out;
}

inline Tensor tensor_from_bytes(const std::vector<uint8_t>& bytes, int n, int h, int w, int c) {
    Tensor t(n, h, w, c);
    if (bytes.size() != t.v.size() * sizeof(float))
        throw IoError("payload size mismatch: got " + std::to_string(bytes.size()) + " bytes for shape " + t.shape_str());
    std::memcpy(t.v.data(), bytes.data(), bytes.size());
    return t;
}

}  // namespace ctdn
