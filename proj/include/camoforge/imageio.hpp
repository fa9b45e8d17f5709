#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace camoforge {

// Interleaved 8-bit RGB image, row-major.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // size = width * height * 3

    ImageU8() = default;
    ImageU8(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0) {}

    uint8_t* at(int x, int y) { return &pixels[(static_cast<size_t>(y) * width + x) * 3]; }
    const uint8_t* at(int x, int y) const {
        return &pixels[(static_cast<size_t>(y) * width + x) * 3];
    }
};

// Planar double image in [0,1]: data laid out as [3][height][width].
std::vector<double> image_to_planar(const ImageU8& img);
ImageU8 planar_to_image(const std::vector<double>& planar, int width, int height);

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

std::vector<uint8_t> encode_png(const ImageU8& img);
ImageU8 decode_png(const std::vector<uint8_t>& bytes);

}  // namespace camoforge
