#pragma once
// Batch commands behind the CLI: corpus synthesis, extraction, training,
// evaluation, ablation ladder and degradation sweeps.

#include "deeprhythm/magnify.hpp"
#include "deeprhythm/media_io.hpp"
#include "deeprhythm/mmstr.hpp"
#include "deeprhythm/network.hpp"
#include "deeprhythm/train.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace deeprhythm::harness {

namespace fs = std::filesystem;

struct SynthConfig {
    int n_real = 100;
    int n_fake = 100;
    int frames = 150;
    int height = 128;
    int width = 128;
    double fps = 30.0;
    double pulse_lo_hz = 0.8;   // per-video pulse frequency drawn from [lo, hi]
    double pulse_hi_hz = 2.5;
    double pulse_amp_lo = 0.005;  // and amplitude
    double pulse_amp_hi = 0.01;
    std::vector<Disruption> disruptions{Disruption::Flatten, Disruption::PhaseScramble, Disruption::BlockTexture};
};

struct Config {
    std::string preset = "desk";
    std::uint64_t seed = 0;

    SynthConfig synth;
    GridSpec grid;
    MagnifyParams magnify;
    nn::NetConfig net;       // blocks / frames are filled from the data
    TrainOptions train;      // seed and attention_only are set per run
    MesoOptions meso;
    nn::Ablation ablation = nn::Ablation::parse("mm,A,P,B,F,e2e");
    std::map<DegradationKind, std::vector<double>> sweep;

    /// Defaults for "desk" or "paper"; anything else is a usage error.
    static Config preset_defaults(const std::string& name);
    /// Preset defaults (override > file "preset" > desk) overlaid with the
    /// file's keys. Unknown keys are a usage error.
    static Config load(const fs::path& path, const std::optional<std::string>& preset_override = std::nullopt);
    static Config from_json_text(const std::string& text, const std::optional<std::string>& preset_override = std::nullopt);

    std::string to_json() const;  // canonical: sorted keys, round-trip doubles
    std::uint64_t hash() const;   // FNV-1a 64 of to_json()
    void validate() const;
};

std::string hex64(std::uint64_t v);

/// Independent stream seeds derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

using Logger = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ReportRow {
    std::string condition;
    std::optional<double> degree;
    double accuracy = 0.0;
    int n_videos = 0;
    std::optional<double> distance;  // mean relative MMST distance
};

struct ExperimentReport {
    std::string command;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string timestamp;  // SOURCE_DATE_EPOCH if set, else wall clock
    std::vector<ReportRow> rows;
    std::vector<std::pair<std::string, std::string>> absent;  // condition, reason

    void write_json(const fs::path& path) const;
    static ExperimentReport read_json(const fs::path& path);
    std::string markdown() const;
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct SynthResult {
    fs::path manifest;
    int train = 0, val = 0, test = 0;
};

/// n_real + n_fake videos with landmark sidecars and a stratified split
/// manifest; val = test = max(1, floor(n_class / 10)) per class.
SynthResult cmd_synth(const Config& cfg, const fs::path& out, const Logger& log = {});

/// Per-split counts for one class.
struct SplitCounts {
    int train = 0, val = 0, test = 0;
};
SplitCounts split_counts(int n_class);

/// Everything one video contributes to training.
struct Extracted {
    MmstMap magnified;
    MmstMap raw;
    FaceCrops crops;
};

/// preprocess -> mask -> magnify -> pool, plus the unmagnified map and face
/// crops. The magnification band is clipped below Nyquist; when nothing of
/// it is left the magnified map equals the raw one.
Extracted extract_video(const FrameSequence& seq, const LandmarkTrack& track, const Config& cfg);

struct ExtractResult {
    int extracted = 0;
    std::vector<std::pair<std::string, std::string>> rejected;  // id, reason
};

/// Writes maps/<id>.mmst, maps/<id>.raw.mmst, crops/<id>.crops, an index
/// extract.json and rejections.csv. Per-video failures are listed, not
/// fatal.
ExtractResult cmd_extract(const Config& cfg, const fs::path& manifest, const fs::path& out, const Logger& log = {});

struct DegradeResult {
    fs::path manifest;
    int videos = 0;
};

/// Degraded copies of the test split (every split with all_splits).
DegradeResult cmd_degrade(const Config& cfg, const fs::path& manifest, DegradationKind kind, double degree,
                          const fs::path& out, bool all_splits = false, const Logger& log = {});

/// An extraction directory loaded for one map flavour.
struct Dataset {
    std::vector<VideoSample> train, val, test;
    std::vector<FaceCrops> train_crops, val_crops, test_crops;
    int frames = 0;  // common T after truncation
    int blocks = 0;
};

/// Maps are cut to the shortest clip (and to max_frames when positive).
Dataset load_dataset(const fs::path& data_dir, bool magnified, bool with_crops, int max_frames = 0);

/// A trained model: architecture, variant and parameters.
struct ModelInfo {
    nn::NetConfig net;
    nn::Ablation ablation;
    std::string config_hash;
    std::uint64_t seed = 0;
    int best_epoch = 0;
};

struct TrainRun {
    ModelInfo info;
    TrainResult stage2;
    std::optional<TrainResult> base;    // classifier-only stage of a staged variant
    std::optional<TrainResult> stage1;  // frame scorer
    Metrics val;
};

/// Trains cfg.ablation and writes model.drck, model.json, train_log.csv
/// (and meso_log.csv / base_log.csv when those stages ran).
TrainRun cmd_train(const Config& cfg, const fs::path& data_dir, const fs::path& out, const Logger& log = {});

/// Writes predictions.csv and metrics.json for the chosen split.
Metrics cmd_eval(const Config& cfg, const fs::path& data_dir, const fs::path& model_dir, const fs::path& out,
                 Split split = Split::Test, const Logger& log = {});

/// The eight-variant ladder; writes ablation.csv, ablation.md, ablation.json
/// and logs/<variant>.csv.
ExperimentReport cmd_ablation(const Config& cfg, const fs::path& data_dir, const fs::path& out, const Logger& log = {});

/// Degrades every test video over cfg.sweep, re-extracts and evaluates.
/// Writes robustness.csv, robustness_<kind>.csv, robustness.md and .json.
ExperimentReport cmd_robustness(const Config& cfg, const fs::path& manifest, const fs::path& model_dir,
                                const fs::path& out, const Logger& log = {});

/// Renders every *.json report under in_dir into one markdown file.
void cmd_report(const fs::path& in_dir, const fs::path& out_file);

/// A model loaded from disk.
class Model {
public:
    explicit Model(const fs::path& dir);
    const ModelInfo& info() const noexcept { return info_; }
    nn::DualStAttenNet<float>& net() noexcept { return *net_; }
    /// t_f filled (when the variant uses it) and truncated to the model T.
    VideoSample prepare(const Extracted& e, Label label) const;
    double predict(const Extracted& e);

private:
    ModelInfo info_;
    std::unique_ptr<nn::DualStAttenNet<float>> net_;
};

}  // namespace deeprhythm::harness
