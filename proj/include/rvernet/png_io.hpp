// 8-bit PNG reading and writing for the two image kinds the lab uses:
// RGB inputs and single-channel masks/heatmaps.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rvernet/common.hpp"

namespace rvernet {

// Row-major, interleaved channels: pixels[(y * width + x) * channels + c].
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3
    std::vector<uint8_t> pixels;

    uint8_t at(int y, int x, int c) const {
        return pixels[(size_t)(y * width + x) * channels + c];
    }
    uint8_t& at(int y, int x, int c) {
        return pixels[(size_t)(y * width + x) * channels + c];
    }
};

// Reads any 8/16-bit gray/palette/RGB/RGBA PNG, normalized to 8-bit with the
// requested channel count (1 = grayscale, 3 = RGB).
ImageU8 read_png(const std::string& path, int channels);

// Writes 8-bit grayscale (channels == 1) or RGB (channels == 3).
void write_png(const std::string& path, const ImageU8& img);

}  // namespace rvernet
