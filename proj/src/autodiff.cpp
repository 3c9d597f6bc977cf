#include "deeprhythm/autodiff.hpp"
#include "deeprhythm/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_set>

namespace deeprhythm::ad {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
    throw usage_error(op + ": " + detail);
}

// Branch pattern of the piecewise ops, recorded only while grad_check asks.
thread_local std::uint64_t* branch_trace = nullptr;

inline void trace(std::uint64_t v) {
    if (!branch_trace) return;
    *branch_trace ^= v + 0x9e3779b97f4a7c15ULL + (*branch_trace << 6) + (*branch_trace >> 2);
}

template <class T>
void trace_signs(const Tensor<T>& x) {
    if (!branch_trace) return;
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        word = (word << 1) | (x.data[i] > T(0) ? 1u : 0u);
        if (i % 64 == 63) trace(word), word = 0;
    }
    trace(word);
}

template <class T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v && v->requires_grad; });
    if (node->requires_grad) {
        node->inputs = std::move(inputs);
        node->backward = std::move(fn);
    }
    return node;
}

template <class T>
bool wants_grad(const Var<T>& v) {
    return v && v->requires_grad;
}

template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, const Conv2dOptions& o, int OH, int OW, T* cols) {
    const std::size_t HW = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* row = cols + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * HW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * o.stride_h - o.pad_h + ky;
                    T* dst = row + static_cast<std::size_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * o.stride_w - o.pad_w + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const T* cols, int C, int H, int W, int kh, int kw, const Conv2dOptions& o, int OH, int OW, T* dx) {
    const std::size_t HW = static_cast<std::size_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* row = cols + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * HW;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * o.stride_h - o.pad_h + ky;
                    if (iy < 0 || iy >= H) continue;
                    const T* src = row + static_cast<std::size_t>(oy) * OW;
                    T* dst = dx + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * o.stride_w - o.pad_w + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <class T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
Var<T> unary(const Var<T>& x, T (*f)(T), T (*df)(T, T)) {
    Tensor<T> out(x->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = f(x->value.data[i]);
    return make_node<T>(std::move(out), {x}, [df](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(in.value.data[i], self.value.data[i]);
    });
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw usage_error("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

template <class T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}

template <class T>
Tensor<T>::Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
        throw usage_error("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
}

template <class T>
Tensor<T>::Tensor(Shape s, const std::vector<T>& values) : Tensor(std::move(s), Buffer<T>(values.begin(), values.end())) {}

template <class T>
Buffer<T>& Node<T>::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
}

template <class T>
Var<T> constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return node;
}

template <class T>
Var<T> parameter(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

template <class T>
void backward(const Var<T>& root) {
    if (root->value.size() != 1) throw usage_error("backward: root must hold one element");
    if (!root->requires_grad) return;
    // Iterative post-order DFS.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

template <class T>
void zero_grad(std::span<const Var<T>> params) {
    for (const Var<T>& p : params) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

// ---------------------------------------------------------------------------

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Conv2dOptions o) {
    if (x->value.rank() != 4 || w->value.rank() != 4) shape_error("conv2d", "expects rank-4 input and kernels");
    const int B = x->value.dim(0), Cin = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    const int Cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != Cin) {
        shape_error("conv2d", "input " + shape_str(x->shape()) + " incompatible with kernels " + shape_str(w->shape()));
    }
    if (bias && bias->value.size() != static_cast<std::size_t>(Cout)) shape_error("conv2d", "bias length mismatch");
    if (o.stride_h < 1 || o.stride_w < 1 || o.pad_h < 0 || o.pad_w < 0) shape_error("conv2d", "bad stride/padding");
    if (H + 2 * o.pad_h < kh || W + 2 * o.pad_w < kw) {
        shape_error("conv2d", "kernel " + shape_str(w->shape()) + " larger than padded input " + shape_str(x->shape()));
    }
    const int OH = (H + 2 * o.pad_h - kh) / o.stride_h + 1;
    const int OW = (W + 2 * o.pad_w - kw) / o.stride_w + 1;
    const int K = Cin * kh * kw;
    const int HW = OH * OW;
    const bool pointwise = kh == 1 && kw == 1 && o.stride_h == 1 && o.stride_w == 1 && o.pad_h == 0 && o.pad_w == 0;

    Tensor<T> out({B, Cout, OH, OW});
    Buffer<T> cols(pointwise ? 0 : static_cast<std::size_t>(K) * HW);
    CMapMat<T> Wm(w->value.data.data(), Cout, K);
    const std::size_t in_stride = static_cast<std::size_t>(Cin) * H * W;
    const std::size_t out_stride = static_cast<std::size_t>(Cout) * HW;
    for (int b = 0; b < B; ++b) {
        const T* xb = x->value.data.data() + in_stride * b;
        if (!pointwise) im2col(xb, Cin, H, W, kh, kw, o, OH, OW, cols.data());
        CMapMat<T> Cm(pointwise ? xb : cols.data(), K, HW);
        MapMat<T> Y(out.data.data() + out_stride * b, Cout, HW);
        Y.noalias() = Wm * Cm;
        if (bias) {
            for (int c = 0; c < Cout; ++c) Y.row(c).array() += bias->value.data[c];
        }
    }

    return make_node<T>(std::move(out), {x, w, bias}, [=](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& wn = *self.inputs[1];
        const Var<T>& bn = self.inputs[2];
        CMapMat<T> Wm(wn.value.data.data(), Cout, K);
        Buffer<T> cols(pointwise ? 0 : static_cast<std::size_t>(K) * HW);
        Buffer<T> dcols(static_cast<std::size_t>(K) * HW);
        T* dw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* db = wants_grad(bn) ? bn->grad_buffer().data() : nullptr;
        for (int b = 0; b < B; ++b) {
            CMapMat<T> G(self.grad.data() + out_stride * b, Cout, HW);
            const T* xb = xn.value.data.data() + in_stride * b;
            if (dw) {
                if (!pointwise) im2col(xb, Cin, H, W, kh, kw, o, OH, OW, cols.data());
                CMapMat<T> Cm(pointwise ? xb : cols.data(), K, HW);
                MapMat<T>(dw, Cout, K).noalias() += G * Cm.transpose();
            }
            if (dx) {
                if (pointwise) {
                    MapMat<T>(dx + in_stride * b, K, HW).noalias() += Wm.transpose() * G;
                } else {
                    MapMat<T>(dcols.data(), K, HW).noalias() = Wm.transpose() * G;
                    col2im(dcols.data(), Cin, H, W, kh, kw, o, OH, OW, dx + in_stride * b);
                }
            }
            if (db) {
                for (int c = 0; c < Cout; ++c) db[c] += G.row(c).sum();
            }
        }
    });
}

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, bool training) {
    const int r = x->value.rank();
    if (r != 2 && r != 4) shape_error("batch_norm", "expects [B,C] or [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1);
    if (B < 1) shape_error("batch_norm", "empty batch");
    const std::size_t inner = r == 4 ? static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3) : 1;
    if (gamma->value.size() != static_cast<std::size_t>(C) || beta->value.size() != static_cast<std::size_t>(C) ||
        state.running_mean.size() != static_cast<std::size_t>(C)) {
        shape_error("batch_norm", "channel count mismatch");
    }
    const std::size_t M = static_cast<std::size_t>(B) * inner;
    std::vector<T> inv_std(static_cast<std::size_t>(C));
    Tensor<T> xhat(x->shape());
    Tensor<T> out(x->shape());
    auto at = [&](int b, int c) { return (static_cast<std::size_t>(b) * C + c) * inner; };
    for (int c = 0; c < C; ++c) {
        T mean, var;
        if (training) {
            double s = 0.0;
            for (int b = 0; b < B; ++b)
                for (std::size_t k = 0; k < inner; ++k) s += x->value.data[at(b, c) + k];
            const double m = s / static_cast<double>(M);
            double v = 0.0;
            for (int b = 0; b < B; ++b)
                for (std::size_t k = 0; k < inner; ++k) {
                    const double d = x->value.data[at(b, c) + k] - m;
                    v += d * d;
                }
            v /= static_cast<double>(M);
            mean = static_cast<T>(m);
            var = static_cast<T>(v);
            const T unbiased = M > 1 ? static_cast<T>(v * static_cast<double>(M) / static_cast<double>(M - 1)) : var;
            state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean;
            state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        inv_std[c] = T(1) / std::sqrt(var + state.eps);
        const T g = gamma->value.data[c], bt = beta->value.data[c];
        for (int b = 0; b < B; ++b) {
            for (std::size_t k = 0; k < inner; ++k) {
                const std::size_t i = at(b, c) + k;
                xhat.data[i] = (x->value.data[i] - mean) * inv_std[c];
                out.data[i] = g * xhat.data[i] + bt;
            }
        }
    }
    return make_node<T>(std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat.data), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& gn = *self.inputs[1];
        Node<T>& bn = *self.inputs[2];
        auto at = [&](int b, int c) { return (static_cast<std::size_t>(b) * C + c) * inner; };
        for (int c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int b = 0; b < B; ++b)
                for (std::size_t k = 0; k < inner; ++k) {
                    const std::size_t i = at(b, c) + k;
                    sum_g += self.grad[i];
                    sum_gx += static_cast<double>(self.grad[i]) * xhat[i];
                }
            if (gn.requires_grad) gn.grad_buffer()[c] += static_cast<T>(sum_gx);
            if (bn.requires_grad) bn.grad_buffer()[c] += static_cast<T>(sum_g);
            if (!xn.requires_grad) continue;
            auto& dx = xn.grad_buffer();
            const T g = gn.value.data[c];
            if (training) {
                const T k1 = g * inv_std[c] / static_cast<T>(M);
                const T mg = static_cast<T>(sum_g), mgx = static_cast<T>(sum_gx);
                for (int b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = at(b, c) + k;
                        dx[i] += k1 * (static_cast<T>(M) * self.grad[i] - mg - xhat[i] * mgx);
                    }
            } else {
                const T k1 = g * inv_std[c];
                for (int b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < inner; ++k) dx[at(b, c) + k] += k1 * self.grad[at(b, c) + k];
            }
        }
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    trace_signs(x->value);
    return unary<T>(x, [](T v) { return v > T(0) ? v : T(0); }, [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
    trace_signs(x->value);
    Tensor<T> out(x->shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x->value.data[i];
        out.data[i] = v > T(0) ? v : slope * v;
    }
    return make_node<T>(std::move(out), {x}, [slope](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (in.value.data[i] > T(0) ? T(1) : slope);
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    return unary<T>(x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
    return unary<T>(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> max_pool2d(const Var<T>& x, int kh, int kw, int sh, int sw) {
    if (x->value.rank() != 4) shape_error("max_pool2d", "expects [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || kh > H || kw > W) {
        shape_error("max_pool2d", "window " + std::to_string(kh) + "x" + std::to_string(kw) + " on " + shape_str(x->shape()));
    }
    const int OH = (H - kh) / sh + 1, OW = (W - kw) / sw + 1;
    Tensor<T> out({B, C, OH, OW});
    std::vector<std::size_t> arg(out.size());
    std::size_t o = 0;
    for (int p = 0; p < B * C; ++p) {
        const std::size_t base = static_cast<std::size_t>(p) * H * W;
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox, ++o) {
                std::size_t best = base + static_cast<std::size_t>(oy * sh) * W + ox * sw;
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const std::size_t i = base + static_cast<std::size_t>(oy * sh + ky) * W + ox * sw + kx;
                        if (x->value.data[i] > x->value.data[best]) best = i;
                    }
                arg[o] = best;
                trace(best);
                out.data[o] = x->value.data[best];
            }
        }
    }
    return make_node<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
    });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    if (x->value.rank() != 4) shape_error("global_avg_pool", "expects [B,C,H,W]");
    const int B = x->value.dim(0), C = x->value.dim(1);
    const std::size_t inner = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
    Tensor<T> out({B, C});
    for (std::size_t p = 0; p < out.size(); ++p) {
        T s = T(0);
        for (std::size_t k = 0; k < inner; ++k) s += x->value.data[p * inner + k];
        out.data[p] = s / static_cast<T>(inner);
    }
    return make_node<T>(std::move(out), {x}, [inner](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const T v = self.grad[p] / static_cast<T>(inner);
            for (std::size_t k = 0; k < inner; ++k) g[p * inner + k] += v;
        }
    });
}

template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    if (x->value.rank() != 2 || w->value.rank() != 2 || x->value.dim(1) != w->value.dim(1)) {
        shape_error("dense", "input " + shape_str(x->shape()) + " incompatible with weights " + shape_str(w->shape()));
    }
    const int B = x->value.dim(0), In = x->value.dim(1), Out = w->value.dim(0);
    if (bias && bias->value.size() != static_cast<std::size_t>(Out)) shape_error("dense", "bias length mismatch");
    Tensor<T> out({B, Out});
    MapMat<T> Y(out.data.data(), B, Out);
    Y.noalias() = CMapMat<T>(x->value.data.data(), B, In) * CMapMat<T>(w->value.data.data(), Out, In).transpose();
    if (bias) {
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < Out; ++j) Y(b, j) += bias->value.data[j];
    }
    return make_node<T>(std::move(out), {x, w, bias}, [B, In, Out](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& wn = *self.inputs[1];
        const Var<T>& bn = self.inputs[2];
        CMapMat<T> G(self.grad.data(), B, Out);
        if (xn.requires_grad) {
            MapMat<T>(xn.grad_buffer().data(), B, In).noalias() += G * CMapMat<T>(wn.value.data.data(), Out, In);
        }
        if (wn.requires_grad) {
            MapMat<T>(wn.grad_buffer().data(), Out, In).noalias() += G.transpose() * CMapMat<T>(xn.value.data.data(), B, In);
        }
        if (wants_grad(bn)) {
            auto& db = bn->grad_buffer();
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < Out; ++j) db[j] += G(b, j);
        }
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a->shape() != b->shape()) shape_error("add", shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    Tensor<T> out(a->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (int k = 0; k < 2; ++k) {
            Node<T>& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            auto& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (a->shape() != b->shape()) shape_error("mul", shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    Tensor<T> out(a->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] * b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& an = *self.inputs[0];
        Node<T>& bn = *self.inputs[1];
        if (an.requires_grad) {
            auto& g = an.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value.data[i];
        }
        if (bn.requires_grad) {
            auto& g = bn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value.data[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out(x->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = factor * x->value.data[i];
    return make_node<T>(std::move(out), {x}, [factor](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    if (numel(shape) != x->value.size()) shape_error("reshape", shape_str(x->shape()) + " -> " + shape_str(shape));
    Tensor<T> out(std::move(shape), x->value.data);
    return make_node<T>(std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> permute(const Var<T>& x, std::array<int, 4> perm) {
    if (x->value.rank() != 4) shape_error("permute", "expects rank 4");
    std::array<int, 4> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != std::array<int, 4>{0, 1, 2, 3}) shape_error("permute", "not a permutation");
    const Shape& in = x->shape();
    const std::size_t in_stride[4] = {static_cast<std::size_t>(in[1]) * in[2] * in[3],
                                      static_cast<std::size_t>(in[2]) * in[3], static_cast<std::size_t>(in[3]), 1};
    Shape os{in[perm[0]], in[perm[1]], in[perm[2]], in[perm[3]]};
    std::vector<std::size_t> src(numel(os));
    std::size_t o = 0;
    for (int a = 0; a < os[0]; ++a)
        for (int b = 0; b < os[1]; ++b)
            for (int c = 0; c < os[2]; ++c)
                for (int d = 0; d < os[3]; ++d)
                    src[o++] = a * in_stride[perm[0]] + b * in_stride[perm[1]] + c * in_stride[perm[2]] + d * in_stride[perm[3]];
    Tensor<T> out(os);
    for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = x->value.data[src[i]];
    return make_node<T>(std::move(out), {x}, [src = std::move(src)](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, int start, int len) {
    if (x->value.rank() != 2 || start < 0 || len < 0 || start + len > x->value.dim(1)) {
        shape_error("slice_cols", "range out of bounds for " + shape_str(x->shape()));
    }
    const int B = x->value.dim(0), K = x->value.dim(1);
    Tensor<T> out({B, len});
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < len; ++j) out.data[static_cast<std::size_t>(b) * len + j] = x->value.data[static_cast<std::size_t>(b) * K + start + j];
    return make_node<T>(std::move(out), {x}, [=](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < len; ++j) g[static_cast<std::size_t>(b) * K + start + j] += self.grad[static_cast<std::size_t>(b) * len + j];
    });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) shape_error("concat_cols", "no inputs");
    const int B = parts[0]->value.dim(0);
    std::vector<int> widths;
    int K = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != 2 || p->value.dim(0) != B) shape_error("concat_cols", "inputs must be [B, K]");
        widths.push_back(p->value.dim(1));
        K += widths.back();
    }
    Tensor<T> out({B, K});
    int offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < widths[k]; ++j)
                out.data[static_cast<std::size_t>(b) * K + offset + j] = parts[k]->value.data[static_cast<std::size_t>(b) * widths[k] + j];
        offset += widths[k];
    }
    return make_node<T>(std::move(out), parts, [B, K, widths](Node<T>& self) {
        int offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            Node<T>& in = *self.inputs[k];
            if (in.requires_grad) {
                auto& g = in.grad_buffer();
                for (int b = 0; b < B; ++b)
                    for (int j = 0; j < widths[k]; ++j)
                        g[static_cast<std::size_t>(b) * widths[k] + j] += self.grad[static_cast<std::size_t>(b) * K + offset + j];
            }
            offset += widths[k];
        }
    });
}

template <class T>
Var<T> apply_attention(const Var<T>& x, const Var<T>& s, const Var<T>& t) {
    if (x->value.rank() != 4) shape_error("apply_attention", "expects X as [B,C,T,N]");
    const int B = x->value.dim(0), C = x->value.dim(1), TT = x->value.dim(2), N = x->value.dim(3);
    if (s->shape() != Shape{B, N} || t->shape() != Shape{B, TT}) {
        shape_error("apply_attention", "X " + shape_str(x->shape()) + " with s " + shape_str(s->shape()) + " and t " +
                                           shape_str(t->shape()));
    }
    Tensor<T> out(x->shape());
    auto idx = [=](int b, int c, int i, int n) { return ((static_cast<std::size_t>(b) * C + c) * TT + i) * N + n; };
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < TT; ++i) {
                const T ti = t->value.data[static_cast<std::size_t>(b) * TT + i];
                for (int n = 0; n < N; ++n) {
                    const T a = ti * s->value.data[static_cast<std::size_t>(b) * N + n];
                    out.data[idx(b, c, i, n)] = a * x->value.data[idx(b, c, i, n)];
                }
            }
    return make_node<T>(std::move(out), {x, s, t}, [=](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& sn = *self.inputs[1];
        Node<T>& tn = *self.inputs[2];
        T* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        T* ds = sn.requires_grad ? sn.grad_buffer().data() : nullptr;
        T* dt = tn.requires_grad ? tn.grad_buffer().data() : nullptr;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < TT; ++i) {
                    const T ti = tn.value.data[static_cast<std::size_t>(b) * TT + i];
                    for (int n = 0; n < N; ++n) {
                        const std::size_t k = idx(b, c, i, n);
                        const T g = self.grad[k];
                        const T sv = sn.value.data[static_cast<std::size_t>(b) * N + n];
                        if (dx) dx[k] += g * (ti * sv);
                        if (ds) ds[static_cast<std::size_t>(b) * N + n] += g * ti * xn.value.data[k];
                        if (dt) dt[static_cast<std::size_t>(b) * TT + i] += g * sv * xn.value.data[k];
                    }
                }
    });
}

template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    if (logits->value.rank() != 2) shape_error("softmax_cross_entropy", "expects [B,K]");
    const int B = logits->value.dim(0), K = logits->value.dim(1);
    if (labels.size() != static_cast<std::size_t>(B)) shape_error("softmax_cross_entropy", "label count mismatch");
    std::vector<T> prob(static_cast<std::size_t>(B) * K);
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        if (labels[b] < 0 || labels[b] >= K) shape_error("softmax_cross_entropy", "label out of range");
        const T* z = logits->value.data.data() + static_cast<std::size_t>(b) * K;
        const T zmax = *std::max_element(z, z + K);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k] - zmax));
        for (int k = 0; k < K; ++k) prob[static_cast<std::size_t>(b) * K + k] = static_cast<T>(std::exp(static_cast<double>(z[k] - zmax)) / denom);
        loss += std::log(denom) - static_cast<double>(z[labels[b]] - zmax);
    }
    Tensor<T> out({1}, std::vector<T>{static_cast<T>(loss / B)});
    std::vector<int> lab(labels.begin(), labels.end());
    return make_node<T>(std::move(out), {logits}, [B, K, prob = std::move(prob), lab = std::move(lab)](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T up = self.grad[0] / static_cast<T>(B);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k) {
                const std::size_t i = static_cast<std::size_t>(b) * K + k;
                g[i] += up * (prob[i] - (k == lab[b] ? T(1) : T(0)));
            }
    });
}

template <class T>
Var<T> sigmoid_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
    const std::size_t B = logits->value.size();
    if (labels.size() != B) shape_error("sigmoid_cross_entropy", "label count mismatch");
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double z = logits->value.data[b];
        loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - (labels[b] ? z : 0.0);
    }
    Tensor<T> out({1}, std::vector<T>{static_cast<T>(loss / static_cast<double>(B))});
    std::vector<int> lab(labels.begin(), labels.end());
    return make_node<T>(std::move(out), {logits}, [B, lab = std::move(lab)](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const T up = self.grad[0] / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b) g[b] += up * (stable_sigmoid(in.value.data[b]) - (lab[b] ? T(1) : T(0)));
    });
}

template <class T>
Var<T> sum(const Var<T>& x) {
    double s = 0.0;
    for (T v : x->value.data) s += v;
    return make_node<T>(Tensor<T>({1}, std::vector<T>{static_cast<T>(s)}), {x}, [](Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (T& v : g) v += self.grad[0];
    });
}

template <class T>
std::pair<Var<T>, Var<T>> lstm_step(const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev, const LstmParams<T>& p) {
    const int H = p.hidden;
    if (h_prev->value.rank() != 2 || h_prev->value.dim(1) != H || c_prev->shape() != h_prev->shape()) {
        shape_error("lstm_step", "state shape must be [B, hidden]");
    }
    const Var<T> gates = add(dense(x, p.w_ih, p.bias), dense(h_prev, p.w_hh, Var<T>{}));
    const Var<T> i = sigmoid(slice_cols(gates, 0, H));
    const Var<T> f = sigmoid(slice_cols(gates, H, H));
    const Var<T> g = tanh(slice_cols(gates, 2 * H, H));
    const Var<T> o = sigmoid(slice_cols(gates, 3 * H, H));
    const Var<T> c = add(mul(f, c_prev), mul(i, g));
    const Var<T> h = mul(o, tanh(c));
    return {h, c};
}

// ---------------------------------------------------------------------------

template <class T>
Adam<T>::Adam(std::vector<Var<T>> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const Var<T>& p : params_) {
        m_.emplace_back(p->value.size(), T(0));
        v_.emplace_back(p->value.size(), T(0));
    }
}

template <class T>
void Adam<T>::step() {
    ++step_count_;
    const double lr = options_.lr, b1 = options_.beta1, b2 = options_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    const double decay = lr * options_.weight_decay;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k]->value.data;
        const auto& g = params_[k]->grad;
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
            double pj = p[j];
            pj -= decay * pj;
            const double mj = b1 * m[j] + (1.0 - b1) * gj;
            const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + options_.eps);
            p[j] = static_cast<T>(pj);
        }
    }
}

template <class T>
void Adam<T>::zero_grad() {
    for (const Var<T>& p : params_) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Var<double>()>& loss,
                           const std::vector<std::pair<std::string, Var<double>>>& inputs,
                           const GradCheckOptions& options) {
    for (const auto& [name, v] : inputs) {
        if (!v->requires_grad) throw usage_error("grad_check: input '" + name + "' is not a parameter");
        std::fill(v->grad.begin(), v->grad.end(), 0.0);
    }
    const Var<double> root = loss();
    backward(root);
    std::vector<Buffer<double>> analytic;
    for (const auto& [name, v] : inputs) {
        analytic.push_back(v->grad.empty() ? Buffer<double>(v->value.size(), 0.0) : v->grad);
    }

    GradCheckResult result;
    const double h = options.h;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto& [name, v] = inputs[k];
        std::vector<std::size_t> coords(v->value.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (options.max_coords_per_tensor > 0 && coords.size() > options.max_coords_per_tensor) {
            std::mt19937_64 rng(options.seed + k);
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t j : coords) {
            double& x = v->value.data[j];
            const double orig = x;
            std::uint64_t sig[3] = {0, 0, 0};
            auto eval = [&](double at, std::uint64_t* slot) {
                x = at;
                branch_trace = options.skip_kinks ? slot : nullptr;
                const double f = loss()->value.data[0];
                branch_trace = nullptr;
                return f;
            };
            double fp, fm;
            try {
                fp = eval(orig + h, &sig[0]);
                fm = eval(orig - h, &sig[1]);
                if (options.skip_kinks) eval(orig, &sig[2]);
            } catch (...) {
                branch_trace = nullptr;
                x = orig;
                throw;
            }
            x = orig;
            if (options.skip_kinks && (sig[0] != sig[2] || sig[1] != sig[2])) {
                ++result.skipped;
                continue;
            }
            const double num = (fp - fm) / (2.0 * h);
            const double a = analytic[k][j];
            const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
            ++result.coords;
            if (rel > result.max_rel_error || !std::isfinite(rel)) {
                result.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
                result.worst = name + "[" + std::to_string(j) + "]";
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

#define DEEPRHYTHM_AD_INSTANTIATE(T)                                                                        \
    template struct Tensor<T>;                                                                              \
    template struct Node<T>;                                                                                \
    template class Adam<T>;                                                                                 \
    template Var<T> constant<T>(Tensor<T>);                                                                 \
    template Var<T> parameter<T>(Tensor<T>);                                                                \
    template void backward<T>(const Var<T>&);                                                               \
    template void zero_grad<T>(std::span<const Var<T>>);                                                    \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dOptions);                  \
    template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool);   \
    template Var<T> relu<T>(const Var<T>&);                                                                 \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                                        \
    template Var<T> sigmoid<T>(const Var<T>&);                                                              \
    template Var<T> tanh<T>(const Var<T>&);                                                                 \
    template Var<T> max_pool2d<T>(const Var<T>&, int, int, int, int);                                       \
    template Var<T> global_avg_pool<T>(const Var<T>&);                                                      \
    template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                   \
    template Var<T> scale<T>(const Var<T>&, T);                                                             \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                       \
    template Var<T> permute<T>(const Var<T>&, std::array<int, 4>);                                          \
    template Var<T> slice_cols<T>(const Var<T>&, int, int);                                                 \
    template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                                             \
    template Var<T> apply_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&);                        \
    template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);                          \
    template Var<T> sigmoid_cross_entropy<T>(const Var<T>&, std::span<const int>);                          \
    template Var<T> sum<T>(const Var<T>&);                                                                  \
    template std::pair<Var<T>, Var<T>> lstm_step<T>(const Var<T>&, const Var<T>&, const Var<T>&,            \
                                                    const LstmParams<T>&);

DEEPRHYTHM_AD_INSTANTIATE(float)
DEEPRHYTHM_AD_INSTANTIATE(double)

}  // namespace deeprhythm::ad
