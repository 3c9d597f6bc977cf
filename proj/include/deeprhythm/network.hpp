#pragma once
// Attention sub-networks, frame scorer, residual classifier and the fused
// model, all over deeprhythm::ad.

#include "deeprhythm/autodiff.hpp"

#include <cstdint>
#include <deque>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace deeprhythm::nn {

using ad::BatchNormState;
using ad::Shape;
using ad::Tensor;
using ad::Var;

enum class Init { Zeros, Ones, HeUniform, Uniform };

/// Named parameters plus batch-norm running statistics. Parameters are
/// initialised from one seeded stream in registration order.
template <class T>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

    /// HeUniform: U(-sqrt(6/fan_in), +); Uniform: U(-bound, bound).
    Var<T> make(const std::string& name, Shape shape, Init init, double fan_in_or_bound = 0.0);
    BatchNormState<T>& batch_norm(const std::string& name, int channels);

    const std::vector<std::pair<std::string, Var<T>>>& named() const noexcept { return params_; }
    std::deque<std::pair<std::string, BatchNormState<T>>>& bn_states() noexcept { return bn_; }
    const std::deque<std::pair<std::string, BatchNormState<T>>>& bn_states() const noexcept { return bn_; }

    /// Parameters whose name starts with any of the prefixes (all if empty).
    std::vector<Var<T>> select(const std::vector<std::string>& prefixes = {}) const;
    Var<T> find(const std::string& name) const;  // nullptr if absent
    std::size_t count(const std::vector<std::string>& prefixes = {}) const;

    /// Copies values (and running statistics) for every name present in both.
    /// Returns the number of tensors copied.
    std::size_t copy_from(const ParamStore& other, const std::vector<std::string>& prefixes = {});

private:
    std::mt19937_64 rng_;
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::deque<std::pair<std::string, BatchNormState<T>>> bn_;
};

/// Versioned archive: "DRCK", u32 version, u32 count, then per tensor
/// (name, rank, dims, float32 payload). Batch-norm statistics are stored as
/// "<name>.running_mean" / "<name>.running_var". Optional optimizer state
/// follows as tensors named "adam.m.<param>", "adam.v.<param>" and a step
/// counter "adam.step".
struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

std::vector<CheckpointTensor> read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointTensor>& tensors);

template <class T>
std::vector<CheckpointTensor> export_params(const ParamStore<T>& store);
/// Every parameter and statistic of the store must be present with the same
/// shape; extra tensors are ignored. Throws a data error otherwise.
template <class T>
void import_params(ParamStore<T>& store, const std::vector<CheckpointTensor>& tensors);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
struct Conv {
    Var<T> w, b;
    ad::Conv2dOptions opt;
    Var<T> operator()(const Var<T>& x) const { return ad::conv2d(x, w, b, opt); }
};

template <class T>
Conv<T> make_conv(ParamStore<T>& store, const std::string& name, int cin, int cout, int kh, int kw,
                  ad::Conv2dOptions opt, bool bias);

template <class T>
struct BatchNorm {
    Var<T> gamma, beta;
    BatchNormState<T>* state = nullptr;
    Var<T> operator()(const Var<T>& x, bool training) const { return ad::batch_norm(x, gamma, beta, *state, training); }
};

template <class T>
BatchNorm<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels);

template <class T>
struct Dense {
    Var<T> w, b;
    Var<T> operator()(const Var<T>& x) const { return ad::dense(x, w, b); }
};

template <class T>
Dense<T> make_dense(ParamStore<T>& store, const std::string& name, int in, int out);

// ---------------------------------------------------------------------------
// Networks. Maps enter as X [B, C, T, N].
// ---------------------------------------------------------------------------

/// Temporal conv (channels kernels of extent kernel x 1, same padding in
/// time), batch norm, max over time, 1x1 projection to one channel, sigmoid.
/// Output s_a [B, N].
template <class T>
class SpatialAttentionNet {
public:
    SpatialAttentionNet(ParamStore<T>& store, const std::string& prefix, int in_channels, int kernel, int channels);
    Var<T> operator()(const Var<T>& x, bool training) const;
    int kernel() const noexcept { return kernel_; }

private:
    int kernel_;
    Conv<T> conv_;
    BatchNorm<T> bn_;
    Conv<T> proj_;
};

/// LSTM over the frame slices X[i,:,:] (length N*C), one scalar head per
/// step, sigmoid. Output t_b [B, T]. In block-major mode the recurrence
/// runs over the N block columns (length T*C each) and the final hidden
/// state is projected to T values.
template <class T>
class TemporalAttentionNet {
public:
    TemporalAttentionNet(ParamStore<T>& store, const std::string& prefix, int blocks, int channels, int hidden,
                         bool block_major, int frames);
    Var<T> operator()(const Var<T>& x) const;

private:
    int blocks_, channels_, hidden_, frames_;
    bool block_major_;
    ad::LstmParams<T> lstm_;
    Dense<T> head_;
};

/// Four conv blocks and two dense layers on size x size RGB crops. Output
/// one logit per crop [B, 1]; t_f = sigmoid(logit).
template <class T>
class Meso4 {
public:
    Meso4(ParamStore<T>& store, const std::string& prefix, int input_size);
    Var<T> operator()(const Var<T>& x, bool training) const;
    int input_size() const noexcept { return size_; }

private:
    int size_;
    Conv<T> c1_, c2_, c3_, c4_;
    BatchNorm<T> b1_, b2_, b3_, b4_;
    Dense<T> d1_, d2_;
};

template <class T>
class BasicBlock {
public:
    BasicBlock(ParamStore<T>& store, const std::string& prefix, int in, int out, int stride);
    Var<T> operator()(const Var<T>& x, bool training) const;

private:
    Conv<T> c1_, c2_;
    BatchNorm<T> b1_, b2_;
    bool project_;
    Conv<T> cs_;
    BatchNorm<T> bs_;
};

/// 3x3 stem with stride (2, 1), four stages of two basic blocks at widths
/// w, 2w, 4w, 8w (strides 1, 2, 2, 2), global average pool, dense -> 2.
template <class T>
class ResidualClassifier {
public:
    ResidualClassifier(ParamStore<T>& store, const std::string& prefix, int in_channels, int width);
    Var<T> operator()(const Var<T>& x, bool training) const;

private:
    Conv<T> stem_;
    BatchNorm<T> stem_bn_;
    std::vector<BasicBlock<T>> blocks_;
    Dense<T> head_;
};

// ---------------------------------------------------------------------------
// Fused model
// ---------------------------------------------------------------------------

/// Which parts of the model are active. mm selects magnified maps; e2e
/// trains attention and classifier jointly from scratch.
struct Ablation {
    bool mm = true;
    bool A = false, P = false, B = false, F = false;
    bool e2e = false;

    /// Comma or space separated subset of {mm, A, P, B, F, e2e}.
    static Ablation parse(const std::string& text);
    std::string str() const;    // canonical token list, e.g. "mm,A,P,e2e"
    std::string name() const;   // ladder label, e.g. "DR-mmst-AP"
    bool any_attention() const noexcept { return A || P || B || F; }
    bool operator==(const Ablation&) const = default;
};

/// The eight ladder variants in report order.
std::vector<Ablation> ablation_ladder();

struct NetConfig {
    int blocks = 25;        // N
    int channels = 3;       // C
    int frames = 150;       // T, only used by block-major temporal attention
    int lstm_hidden = 16;
    int meso_input = 64;
    int classifier_width = 8;
    int sa_kernel = 15;
    int sa_channels = 64;
    bool block_major = false;

    void validate() const;
};

template <class T>
struct Attention {
    Var<T> s, t;             // fused, [B, N] and [B, T]
    Var<T> s_a, t_b;         // null when disabled
};

template <class T>
class DualStAttenNet {
public:
    DualStAttenNet(const NetConfig& cfg, const Ablation& ablation, std::uint64_t seed);
    DualStAttenNet(const DualStAttenNet&) = delete;
    DualStAttenNet& operator=(const DualStAttenNet&) = delete;

    /// s = s_a + s_p, t = t_b + t_f; a pair with neither term enabled is
    /// all ones. s_p [B, N], t_f [B, T] are constants.
    Attention<T> attention(const Var<T>& x, const Var<T>& s_p, const Var<T>& t_f, bool training) const;

    /// Logits [B, 2] of phi((t s^T) * X).
    Var<T> logits(const Var<T>& x, const Var<T>& s_p, const Var<T>& t_f, bool training) const;
    Var<T> classify(const Var<T>& x_attended, bool training) const { return phi_(x_attended, training); }
    Var<T> meso_logits(const Var<T>& crops, bool training) const { return meso_(crops, training); }

    ParamStore<T>& store() noexcept { return store_; }
    const ParamStore<T>& store() const noexcept { return store_; }
    const NetConfig& config() const noexcept { return cfg_; }
    const Ablation& ablation() const noexcept { return ablation_; }

    /// Parameter prefixes trained in stage two for this variant.
    std::vector<std::string> stage2_prefixes(bool attention_only) const;

private:
    NetConfig cfg_;
    Ablation ablation_;
    ParamStore<T> store_;
    SpatialAttentionNet<T> sa_;
    TemporalAttentionNet<T> tb_;
    Meso4<T> meso_;
    ResidualClassifier<T> phi_;
};

/// Elementwise sums with length checks (exposed for tests).
std::vector<float> fuse(std::span<const float> a, std::span<const float> b);

}  // namespace deeprhythm::nn
