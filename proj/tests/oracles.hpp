#pragma once
// Independent reference implementations used by unit and acceptance tests.

#include "deeprhythm/media_io.hpp"
#include "deeprhythm/mmstr.hpp"

#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using deeprhythm::Image;
using deeprhythm::Point2;

inline std::filesystem::path scratch_dir(const std::string& name) {
    const char* env = std::getenv("DEEPRHYTHM_TMP");
    std::filesystem::path base = env ? env : std::filesystem::temp_directory_path() / "deeprhythm_tests";
    std::filesystem::path dir = base / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::vector<std::complex<double>> dft(const std::vector<double>& x) {
    const std::size_t T = x.size();
    std::vector<std::complex<double>> X(T);
    for (std::size_t m = 0; m < T; ++m) {
        std::complex<double> acc{};
        for (std::size_t k = 0; k < T; ++k) {
            const double ang = -2.0 * std::numbers::pi * static_cast<double>((m * k) % T) / T;
            acc += x[k] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        X[m] = acc;
    }
    return X;
}

// Zero every bin outside the band, then invert.
inline std::vector<double> dft_bandpass(const std::vector<double>& x, double fps, double lo, double hi) {
    const std::size_t T = x.size();
    auto X = dft(x);
    for (std::size_t m = 0; m < T; ++m) {
        const double f = std::min(m, T - m) * fps / T;
        if (!(f >= lo && f <= hi) || m == 0) X[m] = 0.0;
    }
    std::vector<double> out(T);
    for (std::size_t k = 0; k < T; ++k) {
        std::complex<double> acc{};
        for (std::size_t m = 0; m < T; ++m) {
            const double ang = 2.0 * std::numbers::pi * static_cast<double>((m * k) % T) / T;
            acc += X[m] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        out[k] = acc.real() / T;
    }
    return out;
}

inline double rms(const std::vector<double>& a) {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s / a.size());
}

inline double rms_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / a.size());
}

// Frequency (Hz) of the largest non-DC DFT bin at or above min_hz.
inline double dominant_frequency(const std::vector<double>& x, double fps, double min_hz = 0.0) {
    const auto X = dft(x);
    const std::size_t T = x.size();
    double best = -1.0, best_f = 0.0;
    for (std::size_t m = 1; m <= T / 2; ++m) {
        const double f = m * fps / T;
        if (f < min_hz) continue;
        if (std::abs(X[m]) > best) {
            best = std::abs(X[m]);
            best_f = f;
        }
    }
    return best_f;
}

inline double bin_power(const std::vector<double>& x, double fps, double hz) {
    const auto X = dft(x);
    const std::size_t m = static_cast<std::size_t>(std::lround(hz * x.size() / fps));
    return std::norm(X[m]);
}

// Winding-number point-in-polygon, independent of the library's even-odd test.
inline bool inside_winding(const std::vector<Point2>& poly, Point2 p) {
    int wn = 0;
    for (std::size_t i = 0; i < poly.size(); ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % poly.size()];
        const double side = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
        if (a.y <= p.y) {
            if (b.y > p.y && side > 0) ++wn;
        } else {
            if (b.y <= p.y && side < 0) --wn;
        }
    }
    return wn != 0;
}

// Convex hull by gift wrapping (Jarvis march), a different algorithm from the library's.
inline std::vector<Point2> hull_jarvis(std::vector<Point2> pts) {
    std::size_t start = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (pts[i].x < pts[start].x || (pts[i].x == pts[start].x && pts[i].y < pts[start].y)) start = i;
    }
    std::vector<Point2> hull;
    std::size_t p = start;
    do {
        hull.push_back(pts[p]);
        std::size_t q = (p + 1) % pts.size();
        for (std::size_t r = 0; r < pts.size(); ++r) {
            const double cr = (pts[q].x - pts[p].x) * (pts[r].y - pts[p].y) -
                              (pts[q].y - pts[p].y) * (pts[r].x - pts[p].x);
            const double dq = std::hypot(pts[q].x - pts[p].x, pts[q].y - pts[p].y);
            const double dr = std::hypot(pts[r].x - pts[p].x, pts[r].y - pts[p].y);
            if (cr < 0 || (cr == 0 && dr > dq)) q = r;
        }
        p = q;
    } while (p != start && hull.size() <= pts.size());
    return hull;
}

// Brute-force validity of one pixel centre: inside the face hull, outside both eyes.
inline bool pixel_valid(const deeprhythm::Landmarks& lm, const std::vector<Point2>& hull, int y, int x) {
    const Point2 c{x + 0.5, y + 0.5};
    if (!inside_winding(hull, c)) return false;
    const std::vector<Point2> re(lm.begin() + 36, lm.begin() + 42), le(lm.begin() + 42, lm.begin() + 48);
    return !inside_winding(re, c) && !inside_winding(le, c);
}

inline std::vector<Point2> face_hull(const deeprhythm::Landmarks& lm) {
    std::vector<Point2> pts(lm.begin(), lm.begin() + 17);
    pts.insert(pts.end(), lm.begin() + 68, lm.end());
    return hull_jarvis(pts);
}

// Per-block mean over valid pixels; empty blocks take the face-wide mean.
// The grid box is passed in, pixel membership is re-derived from block edges.
inline std::vector<double> pooled_means(const Image& frame, const deeprhythm::Landmarks& lm,
                                        const deeprhythm::BoundingBox& box, int rows, int cols) {
    const auto hull = face_hull(lm);
    std::vector<double> sum(static_cast<std::size_t>(rows) * cols * 3, 0.0), face(3, 0.0);
    std::vector<long> cnt(static_cast<std::size_t>(rows) * cols, 0);
    long face_cnt = 0;
    for (int y = 0; y < frame.height; ++y) {
        for (int x = 0; x < frame.width; ++x) {
            if (!pixel_valid(lm, hull, y, x)) continue;
            ++face_cnt;
            for (int c = 0; c < 3; ++c) face[c] += frame.at(y, x, c);
            int r = -1, q = -1;
            for (int k = 0; k < rows; ++k) {
                const double e0 = box.y0 + k * (box.y1 - box.y0) / rows;
                const double e1 = k + 1 == rows ? box.y1 : box.y0 + (k + 1) * (box.y1 - box.y0) / rows;
                if (y + 0.5 >= e0 && y + 0.5 < e1) r = k;
            }
            for (int k = 0; k < cols; ++k) {
                const double e0 = box.x0 + k * (box.x1 - box.x0) / cols;
                const double e1 = k + 1 == cols ? box.x1 : box.x0 + (k + 1) * (box.x1 - box.x0) / cols;
                if (x + 0.5 >= e0 && x + 0.5 < e1) q = k;
            }
            if (r < 0 || q < 0) continue;
            const int b = r * cols + q;
            ++cnt[b];
            for (int c = 0; c < 3; ++c) sum[static_cast<std::size_t>(b) * 3 + c] += frame.at(y, x, c);
        }
    }
    for (int b = 0; b < rows * cols; ++b) {
        for (int c = 0; c < 3; ++c) {
            double& v = sum[static_cast<std::size_t>(b) * 3 + c];
            v = cnt[b] > 0 ? v / cnt[b] : face[c] / face_cnt;
        }
    }
    return sum;
}

inline Image random_image(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(h, w, 3);
    for (double& v : img.data) v = u(rng);
    return img;
}

}  // namespace oracle
