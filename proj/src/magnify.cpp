#include "deeprhythm/magnify.hpp"
#include "deeprhythm/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace deeprhythm {
namespace {

constexpr double kBinomial[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

int reflect101(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

Image blur_and_decimate(const Image& src) {
    const int H = src.height, W = src.width, C = src.channels;
    const int h = H / 2, w = W / 2;
    // Horizontal pass only at even columns, vertical pass only at even rows.
    Image tmp(H, w, C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (int k = -2; k <= 2; ++k) s += kBinomial[k + 2] * src.at(y, reflect101(2 * x + k, W), c);
                tmp.at(y, x, c) = s;
            }
        }
    }
    Image out(h, w, C);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (int k = -2; k <= 2; ++k) s += kBinomial[k + 2] * tmp.at(reflect101(2 * y + k, H), x, c);
                out.at(y, x, c) = s;
            }
        }
    }
    return out;
}

struct Tap {
    int i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> linear_taps(int src, int dst) {
    std::vector<Tap> taps(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
        const double pos = std::clamp((d + 0.5) * scale - 0.5, 0.0, src - 1.0);
        const int i0 = std::min(static_cast<int>(pos), src - 1);
        const int i1 = std::min(i0 + 1, src - 1);
        taps[d] = {i0, i1, pos - i0};
    }
    return taps;
}

bool band_is_valid(double fps, double f_lo, double f_hi) {
    return f_lo > 0.0 && f_lo < f_hi && f_hi < fps / 2.0;
}

// r[d] = (1/T) sum over kept bins m of cos(2 pi m d / T)
std::vector<double> bandpass_kernel(int T, double fps, double f_lo, double f_hi) {
    std::vector<int> kept;
    for (int m = 1; m < T; ++m) {
        const double f = std::min(m, T - m) * fps / T;
        if (f >= f_lo && f <= f_hi) kept.push_back(m);
    }
    std::vector<double> r(static_cast<std::size_t>(T), 0.0);
    for (int d = 0; d < T; ++d) {
        double s = 0.0;
        for (int m : kept) {
            const long phase = (static_cast<long>(m) * d) % T;
            s += std::cos(2.0 * std::numbers::pi * static_cast<double>(phase) / T);
        }
        r[d] = s / T;
    }
    return r;
}

}  // namespace

void MagnifyParams::validate(double fps) const {
    if (!(alpha >= 0.0)) throw usage_error("alpha must be non-negative");
    if (levels < 1) throw usage_error("pyramid_levels must be at least 1");
    if (!(chrom_atten >= 0.0 && chrom_atten <= 1.0)) throw usage_error("chrom_atten must lie in [0,1]");
    if (!band_is_valid(fps, f_lo, f_hi)) {
        throw usage_error("band [" + std::to_string(f_lo) + ", " + std::to_string(f_hi) +
                          "] Hz is outside (0, fps/2) for fps " + std::to_string(fps));
    }
}

std::vector<Image> gaussian_pyramid(const Image& frame, int levels) {
    if (levels < 0) throw usage_error("pyramid levels must be non-negative");
    std::vector<Image> pyr;
    pyr.reserve(static_cast<std::size_t>(levels) + 1);
    pyr.push_back(frame);
    for (int k = 0; k < levels; ++k) {
        const Image& prev = pyr.back();
        if (prev.height / 2 < 2 || prev.width / 2 < 2) {
            throw usage_error("pyramid levels too deep for a " + std::to_string(frame.width) + "x" +
                              std::to_string(frame.height) + " frame");
        }
        pyr.push_back(blur_and_decimate(prev));
    }
    return pyr;
}

Image resize_linear(const Image& src, int height, int width) {
    const auto ty = linear_taps(src.height, height);
    const auto tx = linear_taps(src.width, width);
    const int C = src.channels;
    Image tmp(src.height, width, C);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < width; ++x) {
            const Tap& t = tx[x];
            for (int c = 0; c < C; ++c) {
                tmp.at(y, x, c) = (1.0 - t.w1) * src.at(y, t.i0, c) + t.w1 * src.at(y, t.i1, c);
            }
        }
    }
    Image out(height, width, C);
    for (int y = 0; y < height; ++y) {
        const Tap& t = ty[y];
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < C; ++c) {
                out.at(y, x, c) = (1.0 - t.w1) * tmp.at(t.i0, x, c) + t.w1 * tmp.at(t.i1, x, c);
            }
        }
    }
    return out;
}

std::vector<double> ideal_bandpass(std::span<const double> series, double fps, double f_lo, double f_hi) {
    const int T = static_cast<int>(series.size());
    if (T < 4) throw usage_error("bandpass needs at least 4 samples");
    if (!band_is_valid(fps, f_lo, f_hi)) throw usage_error("bandpass band outside Nyquist range");
    const std::vector<double> r = bandpass_kernel(T, fps, f_lo, f_hi);
    std::vector<double> out(static_cast<std::size_t>(T), 0.0);
    for (int j = 0; j < T; ++j) {
        double s = 0.0;
        for (int k = 0; k < T; ++k) s += r[static_cast<std::size_t>((j - k + T) % T)] * series[k];
        out[j] = s;
    }
    return out;
}

IdealBandpass::IdealBandpass(int length, double fps, double f_lo, double f_hi) : length_(length) {
    if (length < 4) throw usage_error("bandpass needs at least 4 samples");
    if (!band_is_valid(fps, f_lo, f_hi)) throw usage_error("bandpass band outside Nyquist range");
    const std::vector<double> r = bandpass_kernel(length, fps, f_lo, f_hi);
    matrix_.resize(static_cast<std::size_t>(length) * length);
    for (int j = 0; j < length; ++j) {
        for (int k = 0; k < length; ++k) {
            matrix_[static_cast<std::size_t>(j) * length + k] = r[static_cast<std::size_t>((j - k + length) % length)];
        }
    }
}

void IdealBandpass::apply(std::span<double> series, std::size_t count) const {
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (series.size() != count * static_cast<std::size_t>(length_)) {
        throw usage_error("bandpass input size mismatch");
    }
    Eigen::Map<const RowMajor> P(matrix_.data(), length_, length_);
    Eigen::Map<RowMajor> S(series.data(), length_, static_cast<Eigen::Index>(count));
    RowMajor filtered = P * S;
    S = filtered;
}

double reconstruction_weight(int level, int levels) {
    return (level >= 1 && level <= levels) ? 1.0 / levels : 0.0;
}

double uniform_gain(const MagnifyParams& params) {
    double weights = 0.0;
    for (int k = 1; k <= params.levels; ++k) weights += reconstruction_weight(k, params.levels);
    return 1.0 + params.alpha * weights;
}

FrameSequence magnify_video(const FrameSequence& seq, const MagnifyParams& params) {
    params.validate(seq.fps);
    const int T = seq.size();
    if (T < 4) throw usage_error("magnification needs at least 4 frames");
    const int H = seq.height(), W = seq.width(), C = 3;

    // Pyramid levels 1..L for every frame, stored time-major per level.
    std::vector<AlignedVector<double>> bands(static_cast<std::size_t>(params.levels));
    std::vector<std::pair<int, int>> dims(static_cast<std::size_t>(params.levels));
    for (int i = 0; i < T; ++i) {
        std::vector<Image> pyr = gaussian_pyramid(seq.frames[i], params.levels);
        for (int k = 1; k <= params.levels; ++k) {
            const Image& level = pyr[k];
            auto& band = bands[k - 1];
            if (i == 0) {
                dims[k - 1] = {level.height, level.width};
                band.resize(level.data.size() * T);
            }
            std::copy(level.data.begin(), level.data.end(), band.begin() + static_cast<std::ptrdiff_t>(level.data.size() * i));
        }
    }
    const IdealBandpass filter(T, seq.fps, params.f_lo, params.f_hi);
    for (auto& band : bands) filter.apply(band, band.size() / T);

    FrameSequence out;
    out.fps = seq.fps;
    out.source_id = seq.source_id;
    out.frames.reserve(T);
    for (int i = 0; i < T; ++i) {
        Image delta(H, W, C, 0.0);
        for (int k = 1; k <= params.levels; ++k) {
            const auto [h, w] = dims[k - 1];
            Image level(h, w, C);
            const std::size_t n = level.data.size();
            std::copy_n(bands[k - 1].begin() + static_cast<std::ptrdiff_t>(n * i), n, level.data.begin());
            const Image up = resize_linear(level, H, W);
            const double weight = reconstruction_weight(k, params.levels);
            for (std::size_t j = 0; j < delta.data.size(); ++j) delta.data[j] += weight * up.data[j];
        }
        Image frame = seq.frames[i];
        for (std::size_t p = 0; p < static_cast<std::size_t>(H) * W; ++p) {
            double* d = &delta.data[p * C];
            const double luma = (d[0] + d[1] + d[2]) / 3.0;
            for (int c = 0; c < C; ++c) {
                const double amplified = params.alpha * (luma + params.chrom_atten * (d[c] - luma));
                double& v = frame.data[p * C + c];
                v = std::clamp(v + amplified, 0.0, 1.0);
            }
        }
        out.frames.push_back(std::move(frame));
    }
    return out;
}

}  // namespace deeprhythm
