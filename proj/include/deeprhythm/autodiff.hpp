#pragma once
// Reverse-mode automatic differentiation over dense, batch-first tensors.
// Only the layers the attention network needs are provided.

#include "deeprhythm/aligned.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace deeprhythm::ad {

using Shape = std::vector<int>;

template <class T>
using Buffer = AlignedVector<T>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Tensor {
    Shape shape;
    Buffer<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0));
    Tensor(Shape s, Buffer<T> values);
    Tensor(Shape s, const std::vector<T>& values);

    std::size_t size() const noexcept { return data.size(); }
    int rank() const noexcept { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
};

template <class T>
struct Node {
    Tensor<T> value;
    Buffer<T> grad;  // empty until something flows into it
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    const Shape& shape() const noexcept { return value.shape; }
    Buffer<T>& grad_buffer();
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> value);

/// Leaf that accumulates gradients.
template <class T>
Var<T> parameter(Tensor<T> value);

/// Seeds d(root)/d(root) = 1 (root must hold one element) and runs every
/// registered backward function in reverse topological order.
template <class T>
void backward(const Var<T>& root);

template <class T>
void zero_grad(std::span<const Var<T>> params);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

struct Conv2dOptions {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
};

/// x [B, Cin, H, W], w [Cout, Cin, kh, kw], optional bias [Cout].
/// Cross-correlation; H' = (H + 2 pad_h - kh) / stride_h + 1.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions opt = {});

/// Running statistics kept outside the graph.
template <class T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<std::size_t>(channels), T(0)),
          running_var(static_cast<std::size_t>(channels), T(1)) {}
};

/// x [B, C] or [B, C, H, W]. Training mode normalizes with batch statistics
/// (biased variance) and updates the running estimates (unbiased variance);
/// eval mode applies the fixed affine map from running statistics.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                  bool training);

template <class T>
Var<T> relu(const Var<T>& x);
template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope);
template <class T>
Var<T> sigmoid(const Var<T>& x);
template <class T>
Var<T> tanh(const Var<T>& x);

/// x [B, C, H, W]; no padding, output size floor((H - kh) / sh) + 1.
template <class T>
Var<T> max_pool2d(const Var<T>& x, int kh, int kw, int sh, int sw);

/// [B, C, H, W] -> [B, C]
template <class T>
Var<T> global_avg_pool(const Var<T>& x);

/// x [B, In], w [Out, In], optional bias [Out] -> [B, Out]
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> scale(const Var<T>& x, T factor);

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// Rank-4 axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Var<T> permute(const Var<T>& x, std::array<int, 4> perm);

/// x [B, K] -> [B, len], columns start .. start+len-1
template <class T>
Var<T> slice_cols(const Var<T>& x, int start, int len);

/// Concatenates [B, K_i] along columns.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);

/// x [B, C, T, N], s [B, N], t [B, T]: out[b,c,i,n] = (t[b,i] * s[b,n]) * x[b,c,i,n].
template <class T>
Var<T> apply_attention(const Var<T>& x, const Var<T>& s, const Var<T>& t);

/// logits [B, K]; mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

/// logits [B, 1]; mean binary cross-entropy of sigmoid(logit) against 0/1 labels.
template <class T>
Var<T> sigmoid_cross_entropy(const Var<T>& logits, std::span<const int> labels);

template <class T>
Var<T> sum(const Var<T>& x);

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

/// Gate layout along rows of w_ih [4H, In], w_hh [4H, H], b [4H]:
/// input, forget, cell candidate, output.
template <class T>
struct LstmParams {
    Var<T> w_ih, w_hh, bias;
    int hidden = 0;
};

/// i = sig(.), f = sig(.), g = tanh(.), o = sig(.);
/// c_t = f * c_prev + i * g; h_t = o * tanh(c_t).
template <class T>
std::pair<Var<T>, Var<T>> lstm_step(const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev,
                                    const LstmParams<T>& p);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam with decoupled weight decay: p -= lr * wd * p, then the
/// bias-corrected Adam step.
template <class T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, AdamOptions options);

    void step();
    void zero_grad();

    const AdamOptions& options() const noexcept { return options_; }
    AdamOptions& options() noexcept { return options_; }
    long step_count() const noexcept { return step_count_; }
    const std::vector<Var<T>>& params() const noexcept { return params_; }

    std::vector<std::vector<T>>& first_moments() noexcept { return m_; }
    std::vector<std::vector<T>>& second_moments() noexcept { return v_; }
    void set_step_count(long n) noexcept { step_count_ = n; }

private:
    std::vector<Var<T>> params_;
    AdamOptions options_;
    std::vector<std::vector<T>> m_, v_;
    long step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
    double h = 1e-4;
    std::size_t max_coords_per_tensor = 0;  // 0 = every coordinate
    std::uint64_t seed = 0;                 // picks coordinates when capped
    // Skip coordinates whose +-h stencil flips a relu sign or a max-pool
    // winner anywhere in the graph.
    bool skip_kinks = false;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords = 0;   // compared
    std::size_t skipped = 0;  // straddled a kink
    std::string worst;  // "<tensor>[index]" of the largest error
};

/// Central differences against reverse mode. `loss` rebuilds the graph and
/// returns a one-element node; `inputs` are perturbed in place.
/// rel = |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const std::function<Var<double>()>& loss,
                           const std::vector<std::pair<std::string, Var<double>>>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace deeprhythm::ad
