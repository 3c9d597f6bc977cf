#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace deeprhythm {

// Interleaved RGB image with linear intensities, nominally in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<double> data;  // row-major, channel-interleaved

    Image() = default;
    Image(int h, int w, int c = 3, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    double& at(int y, int x, int c) noexcept { return data[index(y, x, c)]; }
    double at(int y, int x, int c) const noexcept { return data[index(y, x, c)]; }

    bool operator==(const Image&) const = default;

    bool same_size(const Image& other) const noexcept {
        return height == other.height && width == other.width && channels == other.channels;
    }
};

/// Reads a binary PPM (P6, 8 or 16 bit) or PNG (8 or 16 bit RGB/RGBA/gray).
/// Intensities are normalized to [0,1]. Throws a data error naming the file.
Image read_image(const std::filesystem::path& path);

/// Writes a binary PPM. `bit_depth` is 8 or 16; values are clamped to [0,1]
/// and rounded to the nearest code.
void write_ppm(const std::filesystem::path& path, const Image& image, int bit_depth = 16);

/// Writes an 8 or 16 bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image, int bit_depth = 8);

}  // namespace deeprhythm
