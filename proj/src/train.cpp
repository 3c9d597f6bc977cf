#include "deeprhythm/train.hpp"
#include "deeprhythm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

namespace deeprhythm {

using ad::Tensor;
using ad::Var;

namespace {

// Marks exactly the selected parameters as trainable for the lifetime of
// the guard.
class TrainableScope {
public:
    TrainableScope(nn::ParamStore<float>& store, const std::vector<std::string>& prefixes) : store_(store) {
        std::set<const ad::Node<float>*> chosen;
        for (const auto& v : store.select(prefixes)) chosen.insert(v.get());
        for (const auto& [name, v] : store.named()) {
            v->requires_grad = chosen.count(v.get()) != 0;
            v->grad.clear();
        }
    }
    ~TrainableScope() {
        for (const auto& [name, v] : store_.named()) {
            v->requires_grad = true;
            v->grad.clear();
        }
    }
    TrainableScope(const TrainableScope&) = delete;
    TrainableScope& operator=(const TrainableScope&) = delete;

private:
    nn::ParamStore<float>& store_;
};

struct Batch {
    Var<float> x, s_p, t_f;
    std::vector<int> labels;
};

Batch make_batch(std::span<const VideoSample> samples, std::span<const std::size_t> idx) {
    const VideoSample& first = samples[idx[0]];
    const int B = static_cast<int>(idx.size()), C = first.C, T = first.T, N = first.N;
    Tensor<float> x({B, C, T, N}), sp({B, N}), tf({B, T}, 0.0f);
    Batch batch;
    for (int b = 0; b < B; ++b) {
        const VideoSample& s = samples[idx[b]];
        if (s.T != T || s.N != N || s.C != C) {
            throw data_error("batch mixes map shapes: '" + first.id + "' is " + std::to_string(T) + "x" +
                             std::to_string(N) + "x" + std::to_string(C) + ", '" + s.id + "' is " +
                             std::to_string(s.T) + "x" + std::to_string(s.N) + "x" + std::to_string(s.C));
        }
        std::copy(s.x.begin(), s.x.end(), x.data.begin() + static_cast<std::ptrdiff_t>(b) * C * T * N);
        std::copy(s.s_p.begin(), s.s_p.end(), sp.data.begin() + static_cast<std::ptrdiff_t>(b) * N);
        if (!s.t_f.empty()) {
            if (static_cast<int>(s.t_f.size()) != T) throw data_error("frame scores of '" + s.id + "' have wrong length");
            std::copy(s.t_f.begin(), s.t_f.end(), tf.data.begin() + static_cast<std::ptrdiff_t>(b) * T);
        }
        batch.labels.push_back(static_cast<int>(s.label));
    }
    batch.x = ad::constant(std::move(x));
    batch.s_p = ad::constant(std::move(sp));
    batch.t_f = ad::constant(std::move(tf));
    return batch;
}

void check_features(const nn::DualStAttenNet<float>& net, const VideoSample& s) {
    if (net.ablation().F && s.t_f.empty()) throw usage_error("video '" + s.id + "' has no frame scores for t_f");
}

double softmax_fake(const Var<float>& logits) {
    const double a = logits->value.data[0], b = logits->value.data[1];
    return 1.0 / (1.0 + std::exp(a - b));
}

std::string batch_ids(std::span<const VideoSample> samples, std::span<const std::size_t> idx) {
    std::string s;
    for (std::size_t i : idx) s += (s.empty() ? "" : ",") + samples[i].id;
    return s;
}

}  // namespace

VideoSample make_sample(const MmstMap& map, Label label, int frames) {
    map.validate();
    const int T = frames > 0 ? std::min(frames, map.T) : map.T;
    VideoSample s;
    s.id = map.source_id;
    s.label = label;
    s.T = T;
    s.N = map.N;
    s.C = map.C;
    s.x.resize(static_cast<std::size_t>(s.C) * T * s.N);
    for (int c = 0; c < s.C; ++c)
        for (int t = 0; t < T; ++t)
            for (int n = 0; n < s.N; ++n) s.x[(static_cast<std::size_t>(c) * T + t) * s.N + n] = map.at(t, n, c);
    // Each block's temporal mean is per-face shading and skin tone; with a
    // couple of hundred training videos the classifier latches onto it.
    for (int c = 0; c < s.C; ++c) {
        for (int n = 0; n < s.N; ++n) {
            float* row = s.x.data() + static_cast<std::size_t>(c) * T * s.N + n;
            double mean = 0.0;
            for (int t = 0; t < T; ++t) mean += row[static_cast<std::size_t>(t) * s.N];
            mean /= T;
            for (int t = 0; t < T; ++t) row[static_cast<std::size_t>(t) * s.N] -= static_cast<float>(mean);
        }
    }
    s.s_p.assign(static_cast<std::size_t>(s.N), 0.0f);
    if (map.prior[0] >= 0) s.s_p = prior_attention(map.prior, map.N);
    return s;
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience), best_loss_(std::numeric_limits<double>::infinity()) {
    if (patience < 1) throw usage_error("patience must be at least 1");
}

bool EarlyStopping::update(int epoch, double val_loss) {
    if (val_loss < best_loss_) {
        best_loss_ = val_loss;
        best_epoch_ = epoch;
        return true;
    }
    if (best_epoch_ == 0) best_epoch_ = epoch;  // never improved: count from the first epoch
    return false;
}

double predict(nn::DualStAttenNet<float>& net, const VideoSample& sample) {
    check_features(net, sample);
    const std::size_t zero = 0;
    const Batch b = make_batch(std::span<const VideoSample>(&sample, 1), std::span<const std::size_t>(&zero, 1));
    return softmax_fake(net.logits(b.x, b.s_p, b.t_f, false));
}

Metrics evaluate(nn::DualStAttenNet<float>& net, std::span<const VideoSample> samples) {
    if (samples.empty()) throw data_error("evaluation split is empty");
    Metrics m;
    double loss = 0.0;
    for (const VideoSample& s : samples) {
        Prediction p;
        p.id = s.id;
        p.truth = s.label;
        p.p_fake = predict(net, s);
        p.label = decide(p.p_fake);
        const double q = s.label == Label::Fake ? p.p_fake : 1.0 - p.p_fake;
        loss += -std::log(std::max(q, 1e-12));
        const bool ok = p.label == p.truth;
        if (s.label == Label::Real) {
            ++m.real_total;
            m.real_correct += ok;
        } else {
            ++m.fake_total;
            m.fake_correct += ok;
        }
        m.predictions.push_back(std::move(p));
    }
    m.n = static_cast<int>(samples.size());
    m.accuracy = static_cast<double>(m.real_correct + m.fake_correct) / m.n;
    m.loss = loss / m.n;
    return m;
}

TrainResult train_dual(nn::DualStAttenNet<float>& net, std::span<const VideoSample> train,
                       std::span<const VideoSample> val, const TrainOptions& opts, const EpochCallback& on_epoch) {
    if (train.empty() || val.empty()) throw data_error("training needs non-empty train and val splits");
    if (opts.batch_size < 1 || opts.max_epochs < 1) throw usage_error("batch_size and max_epochs must be positive");
    for (const auto& s : train) check_features(net, s);

    const auto prefixes = net.stage2_prefixes(opts.attention_only);
    TrainableScope scope(net.store(), prefixes);
    ad::Adam<float> adam(net.store().select(prefixes), {opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay});
    EarlyStopping stopper(opts.patience);
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    std::vector<nn::CheckpointTensor> best = nn::export_params(net.store());
    for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
            const auto idx = std::span<const std::size_t>(order).subspan(
                start, std::min<std::size_t>(opts.batch_size, order.size() - start));
            const Batch b = make_batch(train, idx);
            const Var<float> loss = ad::softmax_cross_entropy(net.logits(b.x, b.s_p, b.t_f, true), b.labels);
            const double value = loss->value.data[0];
            if (!std::isfinite(value)) {
                throw numeric_error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                    std::to_string(start) + " (videos " + batch_ids(train, idx) + ", lr " +
                                    std::to_string(opts.lr) + ")");
            }
            total += value * static_cast<double>(idx.size());
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
        }
        const Metrics vm = evaluate(net, val);
        EpochRecord rec{epoch, total / static_cast<double>(train.size()), vm.loss, vm.accuracy};
        if (!std::isfinite(rec.val_loss)) throw numeric_error("non-finite validation loss at epoch " + std::to_string(epoch));
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (stopper.update(epoch, rec.val_loss)) best = nn::export_params(net.store());
        if (stopper.should_stop(epoch)) {
            result.early_stopped = epoch < opts.max_epochs;
            break;
        }
    }
    nn::import_params(net.store(), best);
    result.best_epoch = stopper.best_epoch();
    result.best_val_loss = stopper.best_loss();
    return result;
}

// ---------------------------------------------------------------------------
// Stage one
// ---------------------------------------------------------------------------

namespace {

struct FrameRef {
    std::size_t video;
    int frame;
};

Var<float> crop_batch(std::span<const FrameSource> videos, std::span<const FrameRef> refs, int size) {
    const int B = static_cast<int>(refs.size());
    Tensor<float> x({B, 3, size, size});
    const std::size_t stride = static_cast<std::size_t>(3) * size * size;
    for (int b = 0; b < B; ++b) {
        const FaceCrops& c = *videos[refs[b].video].crops;
        c.frame(refs[b].frame, std::span<float>(x.data.data() + b * stride, stride));
    }
    return ad::constant(std::move(x));
}

void check_crops(std::span<const FrameSource> videos, int size) {
    for (const auto& v : videos) {
        if (!v.crops || v.crops->T < 1) throw data_error("frame source without crops");
        if (v.crops->size != size) {
            throw usage_error("face crops are " + std::to_string(v.crops->size) + " px, model expects " +
                              std::to_string(size));
        }
    }
}

}  // namespace

TrainResult train_meso(nn::DualStAttenNet<float>& net, std::span<const FrameSource> train,
                       std::span<const FrameSource> val, const MesoOptions& opts, const EpochCallback& on_epoch) {
    if (train.empty() || val.empty()) throw data_error("frame training needs non-empty train and val splits");
    if (opts.batch_size < 1 || opts.epochs < 1 || opts.frames_per_video < 1) {
        throw usage_error("meso batch size, epochs and frames per video must be positive");
    }
    const int size = net.config().meso_input;
    check_crops(train, size);
    check_crops(val, size);

    TrainableScope scope(net.store(), {"meso."});
    ad::Adam<float> adam(net.store().select({"meso."}), {opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay});
    EarlyStopping stopper(opts.patience);
    std::mt19937_64 rng(opts.seed);

    // Fixed, evenly spaced validation frames.
    std::vector<FrameRef> val_refs;
    std::vector<int> val_labels;
    for (std::size_t v = 0; v < val.size(); ++v) {
        const int T = val[v].crops->T;
        for (int k = 0; k < opts.frames_per_video; ++k) {
            val_refs.push_back({v, static_cast<int>((static_cast<long>(k) * T) / opts.frames_per_video)});
            val_labels.push_back(static_cast<int>(val[v].label));
        }
    }

    TrainResult result;
    std::vector<nn::CheckpointTensor> best = nn::export_params(net.store());
    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        std::vector<FrameRef> refs;
        for (std::size_t v = 0; v < train.size(); ++v) {
            std::uniform_int_distribution<int> pick(0, train[v].crops->T - 1);
            for (int k = 0; k < opts.frames_per_video; ++k) refs.push_back({v, pick(rng)});
        }
        std::shuffle(refs.begin(), refs.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < refs.size(); start += opts.batch_size) {
            const auto chunk = std::span<const FrameRef>(refs).subspan(
                start, std::min<std::size_t>(opts.batch_size, refs.size() - start));
            std::vector<int> labels;
            for (const auto& r : chunk) labels.push_back(static_cast<int>(train[r.video].label));
            const Var<float> loss = ad::sigmoid_cross_entropy(net.meso_logits(crop_batch(train, chunk, size), true), labels);
            const double value = loss->value.data[0];
            if (!std::isfinite(value)) {
                throw numeric_error("non-finite frame-scorer loss at epoch " + std::to_string(epoch));
            }
            total += value * static_cast<double>(chunk.size());
            ad::backward(loss);
            adam.step();
            adam.zero_grad();
        }

        double vloss = 0.0;
        int correct = 0;
        for (std::size_t start = 0; start < val_refs.size(); start += opts.batch_size) {
            const std::size_t n = std::min<std::size_t>(opts.batch_size, val_refs.size() - start);
            const auto chunk = std::span<const FrameRef>(val_refs).subspan(start, n);
            const auto labels = std::span<const int>(val_labels).subspan(start, n);
            const Var<float> logits = net.meso_logits(crop_batch(val, chunk, size), false);
            vloss += ad::sigmoid_cross_entropy(logits, labels)->value.data[0] * static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) correct += (logits->value.data[i] > 0.0f) == (labels[i] == 1);
        }
        EpochRecord rec{epoch, total / static_cast<double>(refs.size()), vloss / static_cast<double>(val_refs.size()),
                        static_cast<double>(correct) / static_cast<double>(val_refs.size())};
        result.log.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (stopper.update(epoch, rec.val_loss)) best = nn::export_params(net.store());
        if (stopper.should_stop(epoch)) {
            result.early_stopped = epoch < opts.epochs;
            break;
        }
    }
    nn::import_params(net.store(), best);
    result.best_epoch = stopper.best_epoch();
    result.best_val_loss = stopper.best_loss();
    return result;
}

std::vector<float> score_frames(nn::DualStAttenNet<float>& net, const FaceCrops& crops, int batch) {
    const int size = net.config().meso_input;
    if (crops.size != size) {
        throw usage_error("face crops are " + std::to_string(crops.size) + " px, model expects " + std::to_string(size));
    }
    const FrameSource src{&crops, Label::Real};
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(crops.T));
    for (int start = 0; start < crops.T; start += batch) {
        std::vector<FrameRef> refs;
        for (int t = start; t < std::min(crops.T, start + batch); ++t) refs.push_back({0, t});
        const Var<float> logits = net.meso_logits(crop_batch(std::span<const FrameSource>(&src, 1), refs, size), false);
        for (float z : logits->value.data) out.push_back(1.0f / (1.0f + std::exp(-z)));
    }
    return out;
}

}  // namespace deeprhythm
