#include "tryon/png_io.hpp"

#include "tryon/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace tryon {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

} // namespace

void write_png16(const std::string& path, const PngImage& img) {
    if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3))
        throw IoError("write_png16: invalid image geometry for " + path);
    if (img.pixels.size() !=
        static_cast<size_t>(img.width) * img.height * img.channels)
        throw IoError("write_png16: pixel count mismatch for " + path);

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 16,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_set_swap(png); // in-memory pixels are host (little) endian

    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    const size_t stride = static_cast<size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = reinterpret_cast<png_bytep>(
            const_cast<uint16_t*>(img.pixels.data()) + static_cast<size_t>(y) * stride);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_png8_gray(const std::string& path, int width, int height,
                     const std::vector<uint8_t>& pixels) {
    if (width <= 0 || height <= 0 ||
        pixels.size() != static_cast<size_t>(width) * height)
        throw IoError("write_png8_gray: invalid geometry for " + path);
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(pixels.data()) +
                                       static_cast<size_t>(y) * width;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

PngImage read_png16(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("malformed PNG (libpng read error): " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_byte color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_set_expand_16(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_swap(png);
    png_read_update_info(png, info);

    PngImage img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    const int ch = static_cast<int>(png_get_channels(png, info));
    if (ch != 1 && ch != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported channel count " + std::to_string(ch) + " in " + path);
    }
    img.channels = ch;
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * ch);

    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    const size_t stride = static_cast<size_t>(img.width) * ch;
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] =
            reinterpret_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * stride);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

PngImage tensor_to_png16(const Tensor& t) {
    if (t.shape().size() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
        throw IoError("tensor_to_png16: expected [1,H,W] or [3,H,W], got " +
                      shape_str(t.shape()));
    PngImage img;
    img.channels = t.dim(0);
    img.height = t.dim(1);
    img.width = t.dim(2);
    const auto v = t.values();
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    img.pixels.resize(plane * img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (size_t i = 0; i < plane; ++i) {
            const double x = std::clamp(v[c * plane + i], 0.0, 1.0);
            img.pixels[i * img.channels + c] =
                static_cast<uint16_t>(std::lround(x * 65535.0));
        }
    return img;
}

Tensor png16_to_tensor(const PngImage& img) {
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    std::vector<double> v(plane * img.channels);
    for (int c = 0; c < img.channels; ++c)
        for (size_t i = 0; i < plane; ++i)
            v[c * plane + i] = img.pixels[i * img.channels + c] / 65535.0;
    return Tensor::from_values({img.channels, img.height, img.width}, std::move(v));
}

double quantize16(double v) {
    return std::lround(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0;
}

Tensor quantize16(const Tensor& t) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& x : v) x = quantize16(x);
    return Tensor::from_values(t.shape(), std::move(v));
}

} // namespace tryon
