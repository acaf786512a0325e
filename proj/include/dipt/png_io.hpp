#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dipt/image.hpp"

namespace dipt {

class ImageIoError : public std::runtime_error {
public:
    ImageIoError(const std::filesystem::path& path, const std::string& what)
        : std::runtime_error(path.string() + ": " + what), path_(path) {}

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

/// Decodes an RGB or RGBA PNG into [0, 1] floats (alpha is dropped). Gray inputs are rejected.
inline Image read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw ImageIoError(path, std::string("cannot decode PNG (") + img.message + ")");
    }
    if ((img.format & PNG_FORMAT_FLAG_COLOR) == 0) {
        png_image_free(&img);
        throw ImageIoError(path, "not an RGB image");
    }
    img.format = PNG_FORMAT_RGBA;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ImageIoError(path, "decode failed (" + msg + ")");
    }
    Image out(img.height, img.width, 3);
    for (std::size_t p = 0; p < static_cast<std::size_t>(img.width) * img.height; ++p) {
        for (std::size_t c = 0; c < 3; ++c) out.pixels[p * 3 + c] = static_cast<float>(buf[p * 4 + c]) / 255.0f;
    }
    return out;
}

inline void write_png(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 3) throw ImageIoError(path, "only 3-channel images can be written");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(image.pixels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
        throw ImageIoError(path, std::string("cannot write PNG (") + img.message + ")");
    }
}

/// Bilinear resize of the shorter side to `size`, then a centred square crop.
inline Image resize_crop(const Image& src, std::size_t size) {
    if (src.width == size && src.height == size) return src;
    const double s = static_cast<double>(size) / static_cast<double>(std::min(src.width, src.height));
    const double off_x = (static_cast<double>(src.width) * s - static_cast<double>(size)) / 2.0;
    const double off_y = (static_cast<double>(src.height) * s - static_cast<double>(size)) / 2.0;
    Image out(size, size, src.channels);
    for (std::size_t y = 0; y < size; ++y) {
        const double sy = std::clamp((static_cast<double>(y) + off_y + 0.5) / s - 0.5, 0.0, static_cast<double>(src.height - 1));
        const auto y0 = static_cast<std::size_t>(sy);
        const auto y1 = std::min(y0 + 1, src.height - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < size; ++x) {
            const double sx = std::clamp((static_cast<double>(x) + off_x + 0.5) / s - 0.5, 0.0, static_cast<double>(src.width - 1));
            const auto x0 = static_cast<std::size_t>(sx);
            const auto x1 = std::min(x0 + 1, src.width - 1);
            const double fx = sx - static_cast<double>(x0);
            for (std::size_t c = 0; c < src.channels; ++c) {
                const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
                const double bottom = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
                out.at(y, x, c) = static_cast<float>(top * (1 - fy) + bottom * fy);
            }
        }
    }
    return out;
}

}  // namespace dipt
