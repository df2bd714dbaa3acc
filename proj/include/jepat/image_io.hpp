#pragma once

#include "jepat/tokenization.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace jepat {

/// Binary PPM (P6) bytes for an image in [0,1]. Single-channel images are
/// replicated to gray RGB.
template <typename S>
std::vector<uint8_t> encode_ppm(const ImageGrid<S>& img) {
    const std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    auto to_byte = [](S v) {
        const double c = std::min(1.0, std::max(0.0, static_cast<double>(v)));
        return static_cast<uint8_t>(std::lround(c * 255.0));
    };
    for (Index y = 0; y < img.height; ++y) {
        for (Index x = 0; x < img.width; ++x) {
            for (Index ch = 0; ch < 3; ++ch) {
                const Index src = img.channels == 3 ? ch : 0;
                out.push_back(to_byte(img.at(src, y, x)));
            }
        }
    }
    return out;
}

template <typename S>
void write_ppm(const std::string& path, const ImageGrid<S>& img) {
    const auto bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_ppm: cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace jepat
