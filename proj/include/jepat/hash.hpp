#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace jepat {

/// CRC-32 (IEEE, reflected, poly 0xEDB88320).
class Crc32 {
public:
    Crc32() { crc_ = 0xFFFFFFFFu; }

    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            crc_ = table()[(crc_ ^ p[i]) & 0xFFu] ^ (crc_ >> 8);
        }
    }

    uint32_t final() const { return crc_ ^ 0xFFFFFFFFu; }

    static uint32_t of(const void* data, size_t n) {
        Crc32 c;
        c.update(data, n);
        return c.final();
    }

private:
    static const std::array<uint32_t, 256>& table() {
        static const std::array<uint32_t, 256> t = [] {
            std::array<uint32_t, 256> out{};
            for (uint32_t i = 0; i < 256; ++i) {
                uint32_t c = i;
                for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
                out[i] = c;
            }
            return out;
        }();
        return t;
    }

    uint32_t crc_;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace jepat
