#pragma once

#include "deeprhythm/aligned.hpp"
#include "deeprhythm/image.hpp"
#include "deeprhythm/media_io.hpp"

#include <span>
#include <vector>

namespace deeprhythm {

/// Eulerian color magnification settings.
struct MagnifyParams {
    double alpha = 20.0;
    double f_lo = 0.75;  // Hz
    double f_hi = 4.0;   // Hz
    int levels = 3;
    double chrom_atten = 1.0;

    /// Throws a usage error unless 0 < f_lo < f_hi < fps/2, alpha >= 0,
    /// levels >= 1 and chrom_atten in [0,1].
    void validate(double fps) const;
};

/// Level 0 is the input; level k+1 is the 5-tap binomial blur of level k
/// (reflect-101 borders) decimated by two, sizes floored. Every level must
/// keep at least 2x2 pixels.
std::vector<Image> gaussian_pyramid(const Image& frame, int levels);

/// Separable linear resampling on pixel centres, edges clamped.
Image resize_linear(const Image& src, int height, int width);

/// Ideal temporal bandpass: DFT along time, zero every bin whose |f| falls
/// outside [f_lo, f_hi], inverse DFT, real part.
std::vector<double> ideal_bandpass(std::span<const double> series, double fps, double f_lo,
                                   double f_hi);

/// The same filter precomputed as its real T x T circulant matrix, so many
/// series can be filtered with one matrix product.
class IdealBandpass {
public:
    IdealBandpass(int length, double fps, double f_lo, double f_hi);

    int length() const noexcept { return length_; }

    /// `series` holds `count` interleaved series in time-major layout:
    /// element (t, j) lives at series[t * count + j]. Filtered in place.
    void apply(std::span<double> series, std::size_t count) const;

    const AlignedVector<double>& matrix() const noexcept { return matrix_; }

private:
    int length_;
    AlignedVector<double> matrix_;  // row-major T x T
};

/// Weight of pyramid level k (1-based) in the reconstruction sum. All levels
/// share 1/levels so a spatially uniform in-band signal gains exactly alpha.
double reconstruction_weight(int level, int levels);

/// Closed-form temporal gain for a spatially uniform, gray, in-band signal:
/// 1 + alpha * sum_k reconstruction_weight(k).
double uniform_gain(const MagnifyParams& params);

/// For each pyramid level >= 1: bandpass every pixel/channel series, upsample
/// to full resolution, weight, sum; scale the result by alpha (its chroma
/// part further by chrom_atten) and add it to the input. Output clamped to [0,1].
FrameSequence magnify_video(const FrameSequence& seq, const MagnifyParams& params);

}  // namespace deeprhythm
