#pragma once

#include "deeprhythm/error.hpp"
#include "deeprhythm/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace deeprhythm {

// ---------------------------------------------------------------------------
// Frames and landmarks
// ---------------------------------------------------------------------------

struct FrameSequence {
    std::vector<Image> frames;
    double fps = 30.0;
    std::string source_id;

    int size() const noexcept { return static_cast<int>(frames.size()); }
    int height() const noexcept { return frames.empty() ? 0 : frames.front().height; }
    int width() const noexcept { return frames.empty() ? 0 : frames.front().width; }

    /// Throws a data error if frames disagree in size, fps <= 0, T == 0 or
    /// any intensity leaves [0,1].
    void validate() const;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

inline constexpr int kLandmarkCount = 81;
using Landmarks = std::array<Point2, kLandmarkCount>;

// Index ranges of the 81-point layout (68-point iBUG set + 13 forehead points).
namespace landmark_index {
inline constexpr int kJawBegin = 0, kJawEnd = 17;
inline constexpr int kNoseBridgeTop = 27, kNoseBridgeUpper = 28;
inline constexpr int kRightEyeBegin = 36, kRightEyeEnd = 42;  // 36 outer, 39 inner
inline constexpr int kLeftEyeBegin = 42, kLeftEyeEnd = 48;    // 42 inner, 45 outer
inline constexpr int kRightEyeOuter = 36, kRightEyeInner = 39;
inline constexpr int kLeftEyeInner = 42, kLeftEyeOuter = 45;
inline constexpr int kForeheadBegin = 68, kForeheadEnd = 81;
}  // namespace landmark_index

struct BoundingBox {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    double width() const noexcept { return x1 - x0; }
    double height() const noexcept { return y1 - y0; }
    double area() const noexcept { return width() * height(); }
    Point2 center() const noexcept { return {(x0 + x1) / 2.0, (y0 + y1) / 2.0}; }
};

BoundingBox landmark_bounds(const Landmarks& points);

struct LandmarkTrack {
    std::vector<std::optional<Landmarks>> points;

    int size() const noexcept { return static_cast<int>(points.size()); }
    bool valid(int frame) const { return points.at(frame).has_value(); }
    std::vector<bool> valid_flags() const;
    int invalid_count() const;
};

/// Loads lexicographically ordered .ppm/.pnm/.png frames from a directory.
FrameSequence load_frame_sequence(const std::filesystem::path& dir, double fps);

/// Writes frames as zero-padded 16-bit PPM files (000000.ppm, ...).
void save_frame_sequence(const std::filesystem::path& dir, const FrameSequence& seq);

/// Candidate landmark sets per frame as stored in a sidecar; a frame may
/// list zero, one or several faces.
using LandmarkCandidates = std::vector<std::vector<Landmarks>>;

/// Parses a landmark sidecar. Records are "<frame> x0 y0 ... x80 y80", one
/// per line; '#' starts a comment. Coordinates must lie in [0,width]x[0,height].
LandmarkCandidates load_landmark_candidates(const std::filesystem::path& path, int expected_frames,
                                            int frame_height, int frame_width);

/// Loads a sidecar and resolves multi-face frames with select_face.
LandmarkTrack load_landmark_track(const std::filesystem::path& path, int expected_frames,
                                  int frame_height, int frame_width);

void save_landmark_track(const std::filesystem::path& path, const LandmarkTrack& track);

/// Keeps one face per frame. With several candidates, the one whose box
/// center is nearest the previously kept center wins; before any face has
/// been kept, the largest bounding box wins.
LandmarkTrack select_face(const LandmarkCandidates& candidates,
                          std::optional<Point2> prev_center = std::nullopt);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

inline constexpr int kMaxClipFrames = 300;
inline constexpr int kMaxDroppedFrames = 50;

class VideoRejected : public Error {
public:
    explicit VideoRejected(int dropped)
        : Error(ErrorKind::Data, "video rejected: " + std::to_string(dropped) +
                                     " frames without a face (limit " +
                                     std::to_string(kMaxDroppedFrames) + ")"),
          dropped_(dropped) {}
    int dropped() const noexcept { return dropped_; }

private:
    int dropped_;
};

struct PreprocessedVideo {
    FrameSequence seq;
    LandmarkTrack track;
    int dropped = 0;
};

/// Truncates to the first 300 frames and drops frames without landmarks.
/// Throws VideoRejected when more than 50 frames are dropped.
PreprocessedVideo preprocess_video(const FrameSequence& seq, const LandmarkTrack& track);

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

enum class Label { Real = 0, Fake = 1 };
enum class Disruption { None, Flatten, PhaseScramble, BlockTexture };

const char* to_string(Label label);
const char* to_string(Disruption disruption);
Label parse_label(const std::string& text);
Disruption parse_disruption(const std::string& text);

struct SynthSpec {
    int height = 128;
    int width = 128;
    int frames = 300;
    double fps = 30.0;
    double pulse_freq = 1.2;    // Hz
    double pulse_amp = 0.008;   // intensity units
    Label label = Label::Real;
    Disruption disruption = Disruption::None;
    double motion_jitter = 0.3;   // pixels, std of per-frame translation
    double illum_drift = 2e-4;    // intensity per frame
    double sensor_noise = 0.01;   // per-pixel std, intensity units
    int scramble_grid = 5;        // ROI grid used by phase_scramble / block_texture
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticVideo {
    FrameSequence seq;
    LandmarkTrack track;
    Label label = Label::Real;
};

/// Landmarks of the synthetic elliptical face centred at (cx, cy) with
/// semi-axes (a, b).
Landmarks synthetic_landmarks(double cx, double cy, double a, double b);

SyntheticVideo synth_video(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Degradations
// ---------------------------------------------------------------------------

enum class DegradationKind { Jpeg, Blur, Noise, Sampling };

const char* to_string(DegradationKind kind);
DegradationKind parse_degradation_kind(const std::string& text);

struct DegradationSpec {
    DegradationKind kind = DegradationKind::Jpeg;
    // jpeg: quality in [0,100]; blur: odd kernel size >= 1; noise: std on
    // the 8-bit scale (std/255 in intensity units); sampling: interval K >= 1.
    double degree = 100.0;
    std::uint64_t seed = 0;

    void validate() const;
};

FrameSequence degrade(const FrameSequence& seq, const DegradationSpec& spec);

/// Applies the frame selection of a sampling degradation to a track; other
/// kinds leave landmarks unchanged.
LandmarkTrack degrade_track(const LandmarkTrack& track, const DegradationSpec& spec);

// Per-frame building blocks, exposed for tests and tools.
Image jpeg_roundtrip(const Image& frame, int quality);
Image gaussian_blur(const Image& frame, int kernel_size);
std::array<int, 64> jpeg_quant_table(int quality, bool chroma);

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

enum class Split { Train, Val, Test };

const char* to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
    std::string id;
    std::filesystem::path video;      // frame directory
    std::filesystem::path landmarks;  // sidecar
    Label label = Label::Real;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    double fps = 30.0;
    std::filesystem::path base_dir;  // relative paths resolve against this

    /// Reads the JSON manifest; relative paths are resolved against the
    /// manifest's directory. Validates split disjointness by id and, unless
    /// told otherwise, that every referenced path exists.
    static DatasetManifest load(const std::filesystem::path& path, bool check_paths = true);
    void save(const std::filesystem::path& path) const;

    std::vector<const ManifestEntry*> split(Split which) const;
    std::filesystem::path resolve(const std::filesystem::path& p) const;
    void validate() const;
};

}  // namespace deeprhythm
