#pragma once

#include "deeprhythm/media_io.hpp"
#include "deeprhythm/mmstr.hpp"
#include "deeprhythm/network.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace deeprhythm {

/// One video as the classifier sees it.
struct VideoSample {
    std::string id;
    Label label = Label::Real;
    int T = 0, N = 0, C = 0;
    std::vector<float> x;    // [C, T, N]
    std::vector<float> s_p;  // [N], binary prior
    std::vector<float> t_f;  // [T], frame scores; empty until scored
};

/// Transposes the T-major map into [C, T, N] and removes each (block,
/// channel) series' temporal mean; frames > 0 keeps only the leading rows.
VideoSample make_sample(const MmstMap& map, Label label, int frames = 0);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

/// Stops once `patience` epochs pass without a strict decrease of the
/// validation loss.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience);
    /// Returns true when the loss is a new best.
    bool update(int epoch, double val_loss);
    bool should_stop(int epoch) const noexcept { return epoch - best_epoch_ >= patience_; }
    int best_epoch() const noexcept { return best_epoch_; }
    double best_loss() const noexcept { return best_loss_; }

private:
    int patience_;
    int best_epoch_ = 0;
    double best_loss_;
};

struct TrainOptions {
    double lr = 1e-3;
    double weight_decay = 0.0;
    int max_epochs = 60;
    int patience = 50;
    int batch_size = 8;
    std::uint64_t seed = 0;
    bool attention_only = false;  // classifier frozen, attention nets trained
};

struct TrainResult {
    std::vector<EpochRecord> log;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Stage two: cross-entropy + Adam over the variant's trainable prefixes,
/// early stopping on validation loss, best checkpoint restored on return.
/// All samples must share T, N, C. Throws a numeric error on a non-finite
/// loss.
TrainResult train_dual(nn::DualStAttenNet<float>& net, std::span<const VideoSample> train,
                       std::span<const VideoSample> val, const TrainOptions& opts, const EpochCallback& on_epoch = {});

struct FrameSource {
    const FaceCrops* crops = nullptr;
    Label label = Label::Real;
};

struct MesoOptions {
    double lr = 1e-3;
    double weight_decay = 0.0;
    int epochs = 10;
    int patience = 50;
    int batch_size = 32;
    int frames_per_video = 8;  // random frames drawn per video per epoch
    std::uint64_t seed = 0;
};

/// Stage one: the frame scorer alone on per-frame labels (the video label).
/// val_acc in the log is per-frame accuracy at threshold 0.5.
TrainResult train_meso(nn::DualStAttenNet<float>& net, std::span<const FrameSource> train,
                       std::span<const FrameSource> val, const MesoOptions& opts, const EpochCallback& on_epoch = {});

/// t_f for every frame, eval mode.
std::vector<float> score_frames(nn::DualStAttenNet<float>& net, const FaceCrops& crops, int batch = 32);

struct Prediction {
    std::string id;
    Label truth = Label::Real;
    double p_fake = 0.0;
    Label label = Label::Real;
};

/// Fake iff p_fake > 0.5; ties go to real.
inline Label decide(double p_fake) noexcept { return p_fake > 0.5 ? Label::Fake : Label::Real; }

struct Metrics {
    double accuracy = 0.0;
    double loss = 0.0;
    int n = 0;
    int real_total = 0, real_correct = 0;
    int fake_total = 0, fake_correct = 0;
    std::vector<Prediction> predictions;
};

/// Video-level evaluation, one video at a time in eval mode.
Metrics evaluate(nn::DualStAttenNet<float>& net, std::span<const VideoSample> samples);

/// p_fake for one video.
double predict(nn::DualStAttenNet<float>& net, const VideoSample& sample);

}  // namespace deeprhythm
