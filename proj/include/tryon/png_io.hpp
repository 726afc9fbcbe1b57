#pragma once

#include "tryon/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tryon {

// Minimal 16-bit PNG IO (grayscale or RGB), enough for the dataset layout
// and the CLI. Pixels are row-major, interleaved, full 16-bit range.
struct PngImage {
    int width = 0;
    int height = 0;
    int channels = 1; // 1 or 3
    std::vector<uint16_t> pixels;
};

void write_png16(const std::string& path, const PngImage& img);

// 8-bit grayscale, for normalized heatmap visualizations ([0,255] range).
void write_png8_gray(const std::string& path, int width, int height,
                     const std::vector<uint8_t>& pixels);

// Reads 8- or 16-bit gray/palette/RGB(A) PNGs; everything is expanded to
// 16-bit gray or RGB (alpha stripped).
PngImage read_png16(const std::string& path);

// [C,H,W] tensor in [0,1] -> 16-bit image, v = round(x * 65535) clamped.
PngImage tensor_to_png16(const Tensor& t);

// inverse mapping, v / 65535
Tensor png16_to_tensor(const PngImage& img);

// Snaps values in [0,1] to the 16-bit storage grid k/65535. The dataset
// generator quantizes drawn images before deriving anything from them, so
// a written-then-read tuple reproduces the generator's arrays bit-exactly.
double quantize16(double v);
Tensor quantize16(const Tensor& t);

} // namespace tryon
