#pragma once

#include "deeprhythm/media_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace deeprhythm {

struct GridSpec {
    int rows = 5;
    int cols = 5;

    int size() const noexcept { return rows * cols; }
    void validate() const;
};

/// Non-overlapping rows x cols partition of a face box. A pixel belongs to
/// the block that contains its centre.
struct RoiGrid {
    int rows = 5;
    int cols = 5;
    BoundingBox face_box;

    int size() const noexcept { return rows * cols; }
    double block_width() const noexcept { return face_box.width() / cols; }
    double block_height() const noexcept { return face_box.height() / rows; }

    /// Block index (row-major) containing the point, or -1 outside the box.
    int block_at(Point2 p) const noexcept;
};

/// Component-wise median of the per-frame face boxes (jaw + forehead
/// landmarks) over valid frames. Throws a data error if no frame is valid.
BoundingBox median_face_box(const LandmarkTrack& track);

RoiGrid make_roi_grid(const LandmarkTrack& track, const GridSpec& spec);

/// Pixel validity: inside the face contour and outside both eyes.
struct FaceMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> valid;  // row-major
    int valid_count = 0;

    bool at(int y, int x) const noexcept { return valid[static_cast<std::size_t>(y) * width + x] != 0; }
};

FaceMask face_mask(int height, int width, const Landmarks& points);

struct MaskedFrame {
    Image frame;  // invalid pixels set to 0
    FaceMask mask;
};

/// Throws a data error if the face contour is degenerate.
MaskedFrame mask_face(const Image& frame, const Landmarks& points);

inline constexpr int kPriorBlockCount = 6;
using PriorBlocks = std::array<int, kPriorBlockCount>;

/// Four blocks under the eyes (corners 36, 39, 42, 45 moved down one block
/// height) and two between them (nose bridge 27, 28), on the median
/// landmarks of the track. A duplicate moves to the nearest unused block,
/// searching breadth-first with neighbours visited right, down, left, up.
PriorBlocks prior_block_set(const LandmarkTrack& track, const GridSpec& spec);
PriorBlocks prior_block_set(const Landmarks& points, const RoiGrid& grid);

/// Binary vector of length n with ones at the prior blocks.
std::vector<float> prior_attention(const PriorBlocks& blocks, int n);

/// X in R^{T x N x C}, stored T-major: values[(t * N + n) * C + c].
struct MmstMap {
    int T = 0;
    int N = 0;
    int C = 3;
    double fps = 30.0;
    std::vector<float> values;
    RoiGrid grid;
    PriorBlocks prior{};
    long fallback_blocks = 0;  // (frame, block) cells that used the face-wide mean
    std::string source_id;

    float at(int t, int n, int c) const { return values[(static_cast<std::size_t>(t) * N + n) * C + c]; }
    float& at(int t, int n, int c) { return values[(static_cast<std::size_t>(t) * N + n) * C + c]; }

    /// Block-major copy: out[(n * T + t) * C + c].
    std::vector<float> block_major() const;

    /// First `frames` rows as a new map.
    MmstMap head(int frames) const;

    /// Throws a data error on shape mismatch, NaN, or values outside [0,1].
    void validate() const;
};

/// Average-pools every frame over the valid pixels of each block. Masks come
/// from the track, which must be valid on every frame.
MmstMap compute_mmst_map(const FrameSequence& seq, const LandmarkTrack& track, const GridSpec& spec);

/// Little-endian binary: "MMST", u32 version, u32 T, u32 N, u32 C, f32 fps,
/// then T*N*C float32 values. A text sidecar `<path>.meta` carries the grid,
/// prior blocks and fallback count.
void save_mmst_map(const std::filesystem::path& path, const MmstMap& map);
MmstMap load_mmst_map(const std::filesystem::path& path);

/// Relative Frobenius distance ||a - b|| / ||b|| over the leading rows
/// shared by both maps.
double relative_distance(const MmstMap& a, const MmstMap& b);

// Face crops used for per-frame scoring.
struct FaceCrops {
    int T = 0;
    int size = 0;                    // crops are size x size, CHW
    std::vector<std::uint8_t> data;  // T * 3 * size * size, 8-bit codes

    std::size_t frame_stride() const noexcept { return static_cast<std::size_t>(3) * size * size; }
    void frame(int t, std::span<float> out) const;  // decodes to [0,1]
};

/// Crops `box` out of every frame and resamples it to size x size.
FaceCrops face_crops(const FrameSequence& seq, const BoundingBox& box, int size);

/// "MESO" u32 version, u32 T, u32 size, then uint8 payload.
void save_face_crops(const std::filesystem::path& path, const FaceCrops& crops);
FaceCrops load_face_crops(const std::filesystem::path& path);

}  // namespace deeprhythm
