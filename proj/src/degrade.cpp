#include "deeprhythm/media_io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace deeprhythm {
namespace {

// Baseline JPEG quantization tables (ITU-T T.81 Annex K), natural order.
constexpr std::array<int, 64> kLumaTable = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<int, 64> kChromaTable = {
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

struct DctBasis {
    double c[8][8];  // c[k][n] = alpha(k) cos((2n+1) k pi / 16)
    DctBasis() {
        for (int k = 0; k < 8; ++k) {
            const double alpha = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int n = 0; n < 8; ++n) {
                c[k][n] = alpha * std::cos((2 * n + 1) * k * std::numbers::pi / 16.0);
            }
        }
    }
};

const DctBasis& dct_basis() {
    static const DctBasis basis;
    return basis;
}

// Quantizes one 8x8 block in place (values on the 0..255 scale, level shifted).
void quantize_block(double block[8][8], const std::array<int, 64>& table) {
    const DctBasis& b = dct_basis();
    double tmp[8][8];
    double coef[8][8];
    for (int u = 0; u < 8; ++u) {
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int y = 0; y < 8; ++y) s += b.c[u][y] * block[y][x];
            tmp[u][x] = s;
        }
    }
    for (int u = 0; u < 8; ++u) {
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int x = 0; x < 8; ++x) s += tmp[u][x] * b.c[v][x];
            const double q = table[u * 8 + v];
            coef[u][v] = std::round(s / q) * q;
        }
    }
    for (int y = 0; y < 8; ++y) {
        for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += b.c[u][y] * coef[u][v];
            tmp[y][v] = s;
        }
    }
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += tmp[y][v] * b.c[v][x];
            block[y][x] = s;
        }
    }
}

std::vector<double> gaussian_kernel(int size) {
    const int radius = (size - 1) / 2;
    const double sigma = size / 6.0;
    std::vector<double> k(static_cast<std::size_t>(size));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-(i * i) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

// Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
int reflect101(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace

const char* to_string(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::Jpeg: return "jpeg";
        case DegradationKind::Blur: return "blur";
        case DegradationKind::Noise: return "noise";
        case DegradationKind::Sampling: return "sampling";
    }
    return "jpeg";
}

DegradationKind parse_degradation_kind(const std::string& text) {
    if (text == "jpeg") return DegradationKind::Jpeg;
    if (text == "blur") return DegradationKind::Blur;
    if (text == "noise") return DegradationKind::Noise;
    if (text == "sampling") return DegradationKind::Sampling;
    throw usage_error("unknown degradation '" + text + "'");
}

void DegradationSpec::validate() const {
    const std::string name = to_string(kind);
    switch (kind) {
        case DegradationKind::Jpeg:
            if (!(degree >= 0.0 && degree <= 100.0)) throw usage_error("jpeg quality must lie in [0,100]");
            break;
        case DegradationKind::Blur:
            if (!(degree >= 1.0) || degree != std::floor(degree) || static_cast<long>(degree) % 2 == 0) {
                throw usage_error("blur kernel size must be an odd integer >= 1");
            }
            break;
        case DegradationKind::Noise:
            if (!(degree >= 0.0) || !std::isfinite(degree)) throw usage_error("noise std must be >= 0");
            break;
        case DegradationKind::Sampling:
            if (!(degree >= 1.0) || degree != std::floor(degree)) {
                throw usage_error("sampling interval must be an integer >= 1");
            }
            break;
    }
}

std::array<int, 64> jpeg_quant_table(int quality, bool chroma) {
    quality = std::clamp(quality, 1, 100);
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    const auto& base = chroma ? kChromaTable : kLumaTable;
    std::array<int, 64> table{};
    for (int i = 0; i < 64; ++i) {
        table[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
    }
    return table;
}

Image jpeg_roundtrip(const Image& frame, int quality) {
    const auto luma_q = jpeg_quant_table(quality, false);
    const auto chroma_q = jpeg_quant_table(quality, true);
    const int H = frame.height, W = frame.width;

    // JFIF RGB -> YCbCr on the 0..255 scale, level shifted by 128.
    std::vector<double> planes[3];
    for (auto& p : planes) p.resize(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double r = 255.0 * frame.at(y, x, 0);
            const double g = 255.0 * frame.at(y, x, 1);
            const double b = 255.0 * frame.at(y, x, 2);
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    // Partial edge blocks are padded by edge replication.
    double block[8][8];
    for (int p = 0; p < 3; ++p) {
        const auto& table = p == 0 ? luma_q : chroma_q;
        for (int by = 0; by < H; by += 8) {
            for (int bx = 0; bx < W; bx += 8) {
                for (int y = 0; y < 8; ++y) {
                    for (int x = 0; x < 8; ++x) {
                        const int sy = std::min(by + y, H - 1), sx = std::min(bx + x, W - 1);
                        block[y][x] = planes[p][static_cast<std::size_t>(sy) * W + sx];
                    }
                }
                quantize_block(block, table);
                for (int y = 0; y < 8 && by + y < H; ++y) {
                    for (int x = 0; x < 8 && bx + x < W; ++x) {
                        planes[p][static_cast<std::size_t>(by + y) * W + bx + x] = block[y][x];
                    }
                }
            }
        }
    }
    Image out(H, W, 3);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            const double Y = planes[0][i] + 128.0, cb = planes[1][i], cr = planes[2][i];
            const double rgb[3] = {Y + 1.402 * cr, Y - 0.344136 * cb - 0.714136 * cr, Y + 1.772 * cb};
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp(rgb[c] / 255.0, 0.0, 1.0);
        }
    }
    return out;
}

Image gaussian_blur(const Image& frame, int kernel_size) {
    if (kernel_size <= 1) return frame;
    const std::vector<double> k = gaussian_kernel(kernel_size);
    const int r = (kernel_size - 1) / 2;
    const int H = frame.height, W = frame.width, C = frame.channels;
    Image tmp(H, W, C), out(H, W, C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i) s += k[i + r] * frame.at(y, reflect101(x + i, W), c);
                tmp.at(y, x, c) = s;
            }
        }
    }
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(reflect101(y + i, H), x, c);
                out.at(y, x, c) = std::clamp(s, 0.0, 1.0);
            }
        }
    }
    return out;
}

FrameSequence degrade(const FrameSequence& seq, const DegradationSpec& spec) {
    spec.validate();
    FrameSequence out;
    out.fps = seq.fps;
    out.source_id = seq.source_id;

    switch (spec.kind) {
        case DegradationKind::Jpeg: {
            const int quality = static_cast<int>(std::lround(spec.degree));
            for (const Image& f : seq.frames) out.frames.push_back(jpeg_roundtrip(f, quality));
            break;
        }
        case DegradationKind::Blur: {
            const int size = static_cast<int>(spec.degree);
            for (const Image& f : seq.frames) out.frames.push_back(gaussian_blur(f, size));
            break;
        }
        case DegradationKind::Noise: {
            const double sigma = spec.degree / 255.0;
            for (int i = 0; i < seq.size(); ++i) {
                Image f = seq.frames[i];
                if (sigma > 0.0) {
                    // One stream per frame, keyed on (seed, frame index).
                    std::seed_seq key{static_cast<std::uint32_t>(spec.seed),
                                      static_cast<std::uint32_t>(spec.seed >> 32),
                                      static_cast<std::uint32_t>(i), 0x6e6f6973u};
                    std::mt19937_64 rng(key);
                    std::normal_distribution<double> gauss(0.0, sigma);
                    for (double& v : f.data) v = std::clamp(v + gauss(rng), 0.0, 1.0);
                }
                out.frames.push_back(std::move(f));
            }
            break;
        }
        case DegradationKind::Sampling: {
            const int step = static_cast<int>(spec.degree);
            for (int i = 0; i < seq.size(); i += step) out.frames.push_back(seq.frames[i]);
            out.fps = seq.fps / step;
            break;
        }
    }
    return out;
}

LandmarkTrack degrade_track(const LandmarkTrack& track, const DegradationSpec& spec) {
    spec.validate();
    if (spec.kind != DegradationKind::Sampling) return track;
    const int step = static_cast<int>(spec.degree);
    LandmarkTrack out;
    for (int i = 0; i < track.size(); i += step) out.points.push_back(track.points[i]);
    return out;
}

}  // namespace deeprhythm
