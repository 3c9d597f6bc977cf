#include "deeprhythm/image.hpp"
#include "deeprhythm/error.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

namespace deeprhythm {
namespace {

std::string lower_ext(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    return ext;
}

// Skips whitespace and '#' comments in a PNM header.
int read_pnm_int(std::istream& in, const std::string& name) {
    int ch = in.peek();
    while (ch != EOF) {
        if (std::isspace(ch)) {
            in.get();
        } else if (ch == '#') {
            std::string discard;
            std::getline(in, discard);
        } else {
            break;
        }
        ch = in.peek();
    }
    int value = -1;
    if (!(in >> value) || value < 0) {
        throw data_error("unreadable frame " + name + ": malformed PPM header");
    }
    return value;
}

Image read_ppm(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw data_error("unreadable frame " + name);
    }
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') {
        throw data_error("unreadable frame " + name + ": not a binary PPM");
    }
    const int width = read_pnm_int(in, name);
    const int height = read_pnm_int(in, name);
    const int maxval = read_pnm_int(in, name);
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
        throw data_error("unreadable frame " + name + ": bad PPM dimensions");
    }
    in.get();  // single whitespace before raster

    Image image(height, width, 3);
    const std::size_t count = image.data.size();
    const double scale = 1.0 / maxval;
    if (maxval < 256) {
        std::vector<unsigned char> raw(count);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
        if (!in) {
            throw data_error("unreadable frame " + name + ": truncated raster");
        }
        for (std::size_t i = 0; i < count; ++i) {
            image.data[i] = std::min(1.0, raw[i] * scale);
        }
    } else {
        std::vector<unsigned char> raw(count * 2);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (!in) {
            throw data_error("unreadable frame " + name + ": truncated raster");
        }
        for (std::size_t i = 0; i < count; ++i) {
            const unsigned v = (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
            image.data[i] = std::min(1.0, v * scale);
        }
    }
    return image;
}

struct PngReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};

Image read_png(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(name.c_str(), "rb"));
    if (!file) {
        throw data_error("unreadable frame " + name);
    }
    PngReadGuard guard;
    guard.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!guard.png) {
        throw data_error("unreadable frame " + name + ": libpng init failed");
    }
    guard.info = png_create_info_struct(guard.png);
    if (!guard.info) {
        throw data_error("unreadable frame " + name + ": libpng init failed");
    }
    if (setjmp(png_jmpbuf(guard.png))) {
        throw data_error("unreadable frame " + name + ": corrupt PNG");
    }
    png_init_io(guard.png, file.get());
    png_read_info(guard.png, guard.info);

    const int color_type = png_get_color_type(guard.png, guard.info);
    const int bit_depth = png_get_bit_depth(guard.png, guard.info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(guard.png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
        if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(guard.png);
        png_set_gray_to_rgb(guard.png);
    }
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(guard.png);
    if (png_get_valid(guard.png, guard.info, PNG_INFO_tRNS)) png_set_strip_alpha(guard.png);
    if (bit_depth == 16) png_set_swap(guard.png);  // host little-endian
    png_read_update_info(guard.png, guard.info);

    const int width = static_cast<int>(png_get_image_width(guard.png, guard.info));
    const int height = static_cast<int>(png_get_image_height(guard.png, guard.info));
    const int depth = png_get_bit_depth(guard.png, guard.info);
    const std::size_t rowbytes = png_get_rowbytes(guard.png, guard.info);
    std::vector<unsigned char> raster(rowbytes * height);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = raster.data() + rowbytes * y;
    png_read_image(guard.png, rows.data());

    Image image(height, width, 3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const std::size_t k = static_cast<std::size_t>(x) * 3 + c;
                double v = 0.0;
                if (depth == 16) {
                    std::uint16_t s = 0;
                    std::memcpy(&s, rows[y] + 2 * k, 2);
                    v = s / 65535.0;
                } else {
                    v = rows[y][k] / 255.0;
                }
                image.at(y, x, c) = v;
            }
        }
    }
    return image;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".ppm" || ext == ".pnm") return read_ppm(path);
    if (ext == ".png") return read_png(path);
    throw data_error("unreadable frame " + path.string() + ": unsupported extension");
}

void write_ppm(const std::filesystem::path& path, const Image& image, int bit_depth) {
    if (image.channels != 3) {
        throw usage_error("write_ppm expects 3 channels");
    }
    if (bit_depth != 8 && bit_depth != 16) {
        throw usage_error("write_ppm bit depth must be 8 or 16");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw data_error("cannot write " + path.string());
    }
    const int maxval = bit_depth == 8 ? 255 : 65535;
    out << "P6\n" << image.width << ' ' << image.height << '\n' << maxval << '\n';
    std::vector<unsigned char> raw;
    raw.reserve(image.data.size() * (bit_depth / 8));
    for (double v : image.data) {
        const auto code = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
        if (bit_depth == 16) raw.push_back(static_cast<unsigned char>(code >> 8));
        raw.push_back(static_cast<unsigned char>(code & 0xff));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw data_error("cannot write " + path.string());
    }
}

void write_png(const std::filesystem::path& path, const Image& image, int bit_depth) {
    if (image.channels != 3 || (bit_depth != 8 && bit_depth != 16)) {
        throw usage_error("write_png expects 3 channels and depth 8 or 16");
    }
    const std::string name = path.string();
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(name.c_str(), "wb"));
    if (!file) {
        throw data_error("cannot write " + name);
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, info ? &info : nullptr);
        throw data_error("cannot write " + name + ": libpng init failed");
    }
    const int maxval = bit_depth == 8 ? 255 : 65535;
    const std::size_t bytes = static_cast<std::size_t>(bit_depth / 8);
    std::vector<unsigned char> raster(image.data.size() * bytes);
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        const auto code = static_cast<unsigned>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * maxval));
        if (bytes == 2) {
            raster[2 * i] = static_cast<unsigned char>(code >> 8);
            raster[2 * i + 1] = static_cast<unsigned char>(code & 0xff);
        } else {
            raster[i] = static_cast<unsigned char>(code);
        }
    }
    std::vector<png_bytep> rows(image.height);
    const std::size_t stride = static_cast<std::size_t>(image.width) * 3 * bytes;
    for (int y = 0; y < image.height; ++y) rows[y] = raster.data() + stride * y;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw data_error("cannot write " + name + ": libpng error");
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, image.width, image.height, bit_depth, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace deeprhythm
