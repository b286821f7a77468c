#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace ctdn {

// CRC-32 (IEEE, reflected). Used for dataset payload checksums.
inline uint32_t crc32(const void* data, size_t len, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc = ~crc;
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return ~crc;
}

// Minimal SHA-1, enough for git-style blob hashes in report provenance.
class Sha1 {
   public:
    Sha1() { reset(); }

    void reset() {
        h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
        len_ = 0;
        buf_used_ = 0;
    }

    void update(const void* data, size_t len) {
        const auto* p = static_cast<const uint8_t*>(data);
        len_ += len;
        while (len > 0) {
            size_t take = std::min(len, size_t(64) - buf_used_);
            std::memcpy(buf_ + buf_used_, p, take);
            buf_used_ += take;
            p += take;
            len -= take;
            if (buf_used_ == 64) {
                process(buf_);
                buf_used_ = 0;
            }
        }
    }

    std::string hex_digest() {
        uint64_t bits = len_ * 8;
        uint8_t pad = 0x80;
        update(&pad, 1);
        uint8_t zero = 0;
        while (buf_used_ != 56) update(&zero, 1);
        uint8_t lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = uint8_t(bits >> (56 - 8 * i));
        update(lenb, 8);
        static const char* hex = "0123456789abcdef";
        std::string out;
        for (uint32_t w : h_)
            for (int i = 28; i >= 0; i -= 4) out += hex[(w >> i) & 0xf];
        return out;
    }

   private:
    static uint32_t rol(uint32_t x, int k) { return (x << k) | (x >> (32 - k)); }

    void process(const uint8_t* block) {
        uint32_t w[80];
        for (int i = 0; i < 16; ++i)
            w[i] = (uint32_t(block[4 * i]) << 24) | (uint32_t(block[4 * i + 1]) << 16) |
                   (uint32_t(block[4 * i + 2]) << 8) | uint32_t(block[4 * i + 3]);
        for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
        uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
        for (int i = 0; i < 80; ++i) {
            uint32_t f, k;
            if (i < 20) {
                f = (b & c) | (~b & d);
                k = 0x5A827999u;
            } else if (i < 40) {
                f = b ^ c ^ d;
                k = 0x6ED9EBA1u;
            } else if (i < 60) {
                f = (b & c) | (b & d) | (c & d);
                k = 0x8F1BBCDCu;
            } else {
                f = b ^ c ^ d;
                k = 0xCA62C1D6u;
            }
            uint32_t tmp = rol(a, 5) + f + e + k + w[i];
            e = d;
            d = c;
            c = rol(b, 30);
            b = a;
            a = tmp;
        }
        h_[0] += a;
        h_[1] += b;
        h_[2] += c;
        h_[3] += d;
        h_[4] += e;
    }

    std::array<uint32_t, 5> h_;
    uint64_t len_;
    uint8_t buf_[64];
    size_t buf_used_;
};

// Hash of "blob <len>\0<bytes>", hex encoded -- the same value `git hash-object`
// prints for the file, so reports can be cross-checked against a checkout.
inline std::string git_blob_sha1(const std::vector<uint8_t>& bytes) {
    Sha1 h;
    std::string hdr = "blob " + std::to_string(bytes.size());
    h.update(hdr.data(), hdr.size() + 1);  // include the trailing NUL
    h.update(bytes.data(), bytes.size());
    return h.hex_digest();
}

}  // namespace ctdn
