#include "deeprhythm/network.hpp"
#include "deeprhythm/error.hpp"

#include "binio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace deeprhythm::nn {
namespace {

bool has_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
    if (prefixes.empty()) return true;
    return std::any_of(prefixes.begin(), prefixes.end(),
                       [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

template <class T>
Var<T> ParamStore<T>::make(const std::string& name, Shape shape, Init init, double fan_in_or_bound) {
    if (find(name)) throw usage_error("duplicate parameter '" + name + "'");
    Tensor<T> value(std::move(shape));
    double bound = 0.0;
    switch (init) {
    case Init::Zeros:
        break;
    case Init::Ones:
        std::fill(value.data.begin(), value.data.end(), T(1));
        break;
    case Init::HeUniform:
        bound = std::sqrt(6.0 / fan_in_or_bound);
        break;
    case Init::Uniform:
        bound = fan_in_or_bound;
        break;
    }
    if (bound > 0.0) {
        std::uniform_real_distribution<double> u(-bound, bound);
        for (T& v : value.data) v = static_cast<T>(u(rng_));
    }
    Var<T> var = ad::parameter(std::move(value));
    params_.emplace_back(name, var);
    return var;
}

template <class T>
BatchNormState<T>& ParamStore<T>::batch_norm(const std::string& name, int channels) {
    for (const auto& [n, st] : bn_) {
        if (n == name) throw usage_error("duplicate batch-norm state '" + name + "'");
    }
    bn_.emplace_back(name, BatchNormState<T>(channels));
    return bn_.back().second;
}

template <class T>
std::vector<Var<T>> ParamStore<T>::select(const std::vector<std::string>& prefixes) const {
    std::vector<Var<T>> out;
    for (const auto& [name, var] : params_)
        if (has_prefix(name, prefixes)) out.push_back(var);
    return out;
}

template <class T>
Var<T> ParamStore<T>::find(const std::string& name) const {
    for (const auto& [n, var] : params_)
        if (n == name) return var;
    return nullptr;
}

template <class T>
std::size_t ParamStore<T>::count(const std::vector<std::string>& prefixes) const {
    std::size_t n = 0;
    for (const auto& [name, var] : params_)
        if (has_prefix(name, prefixes)) n += var->value.size();
    return n;
}

template <class T>
std::size_t ParamStore<T>::copy_from(const ParamStore& other, const std::vector<std::string>& prefixes) {
    std::size_t copied = 0;
    for (auto& [name, var] : params_) {
        if (!has_prefix(name, prefixes)) continue;
        const Var<T> src = other.find(name);
        if (!src) continue;
        if (src->shape() != var->shape()) throw usage_error("shape mismatch copying '" + name + "'");
        var->value.data = src->value.data;
        ++copied;
    }
    for (auto& [name, st] : bn_) {
        if (!has_prefix(name, prefixes)) continue;
        for (const auto& [n, src] : other.bn_) {
            if (n != name) continue;
            st = src;
            ++copied;
        }
    }
    return copied;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write checkpoint " + path.string());
    out.write("DRCK", 4);
    binio::put_u32(out, kCheckpointVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.data.size() != ad::numel(t.shape)) throw usage_error("checkpoint tensor '" + t.name + "' has wrong length");
        binio::put_string(out, t.name);
        binio::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) binio::put_u32(out, static_cast<std::uint32_t>(d));
        binio::put_f32_array(out, t.data.data(), t.data.size());
    }
    if (!out) throw data_error("failed writing checkpoint " + path.string());
}

std::vector<CheckpointTensor> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open checkpoint " + path.string());
    const std::string what = "checkpoint " + path.string();
    binio::expect_magic(in, "DRCK", what);
    const std::uint32_t version = binio::get_u32(in, what);
    if (version != kCheckpointVersion) throw data_error(what + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = binio::get_u32(in, what);
    std::vector<CheckpointTensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        CheckpointTensor t;
        t.name = binio::get_string(in, what);
        const std::uint32_t rank = binio::get_u32(in, what);
        if (rank > 8) throw data_error(what + ": corrupt rank");
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(static_cast<int>(binio::get_u32(in, what)));
            n *= static_cast<std::size_t>(t.shape.back());
        }
        if (n > (std::size_t{1} << 28)) throw data_error(what + ": corrupt tensor size");
        t.data.resize(n);
        binio::get_f32_array(in, t.data.data(), n, what);
        out.push_back(std::move(t));
    }
    return out;
}

template <class T>
std::vector<CheckpointTensor> export_params(const ParamStore<T>& store) {
    std::vector<CheckpointTensor> out;
    for (const auto& [name, var] : store.named()) {
        out.push_back({name, var->shape(), std::vector<float>(var->value.data.begin(), var->value.data.end())});
    }
    for (const auto& [name, st] : store.bn_states()) {
        const int c = static_cast<int>(st.running_mean.size());
        out.push_back({name + ".running_mean", {c}, std::vector<float>(st.running_mean.begin(), st.running_mean.end())});
        out.push_back({name + ".running_var", {c}, std::vector<float>(st.running_var.begin(), st.running_var.end())});
    }
    return out;
}

template <class T>
void import_params(ParamStore<T>& store, const std::vector<CheckpointTensor>& tensors) {
    std::map<std::string, const CheckpointTensor*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t;
    auto fetch = [&](const std::string& name, const Shape& shape) -> const CheckpointTensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw data_error("checkpoint lacks tensor '" + name + "'");
        if (it->second->shape != shape) {
            throw data_error("checkpoint tensor '" + name + "' has shape " + ad::shape_str(it->second->shape) +
                             ", model expects " + ad::shape_str(shape));
        }
        return *it->second;
    };
    for (const auto& [name, var] : store.named()) {
        const auto& t = fetch(name, var->shape());
        std::copy(t.data.begin(), t.data.end(), var->value.data.begin());
    }
    for (auto& [name, st] : store.bn_states()) {
        const Shape s{static_cast<int>(st.running_mean.size())};
        const auto& m = fetch(name + ".running_mean", s);
        const auto& v = fetch(name + ".running_var", s);
        std::copy(m.data.begin(), m.data.end(), st.running_mean.begin());
        std::copy(v.data.begin(), v.data.end(), st.running_var.begin());
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
Conv<T> make_conv(ParamStore<T>& store, const std::string& name, int cin, int cout, int kh, int kw,
                  ad::Conv2dOptions opt, bool bias) {
    Conv<T> c;
    c.w = store.make(name + ".w", {cout, cin, kh, kw}, Init::HeUniform, static_cast<double>(cin) * kh * kw);
    if (bias) c.b = store.make(name + ".b", {cout}, Init::Zeros);
    c.opt = opt;
    return c;
}

template <class T>
BatchNorm<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels) {
    BatchNorm<T> bn;
    bn.gamma = store.make(name + ".gamma", {channels}, Init::Ones);
    bn.beta = store.make(name + ".beta", {channels}, Init::Zeros);
    bn.state = &store.batch_norm(name, channels);
    return bn;
}

template <class T>
Dense<T> make_dense(ParamStore<T>& store, const std::string& name, int in, int out) {
    Dense<T> d;
    d.w = store.make(name + ".w", {out, in}, Init::HeUniform, in);
    d.b = store.make(name + ".b", {out}, Init::Zeros);
    return d;
}

// ---------------------------------------------------------------------------
// Spatial attention
// ---------------------------------------------------------------------------

template <class T>
SpatialAttentionNet<T>::SpatialAttentionNet(ParamStore<T>& store, const std::string& prefix, int in_channels,
                                            int kernel, int channels)
    : kernel_(kernel) {
    if (kernel < 1 || channels < 1) throw usage_error("spatial attention: kernel and channels must be positive");
    conv_ = make_conv(store, prefix + ".conv", in_channels, channels, kernel, 1, {1, 1, kernel / 2, 0}, false);
    bn_ = make_batch_norm(store, prefix + ".bn", channels);
    proj_ = make_conv(store, prefix + ".proj", channels, 1, 1, 1, {}, true);
}

template <class T>
Var<T> SpatialAttentionNet<T>::operator()(const Var<T>& x, bool training) const {
    const int B = x->value.dim(0), TT = x->value.dim(2), N = x->value.dim(3);
    if (TT < kernel_) {
        throw usage_error("spatial attention needs at least " + std::to_string(kernel_) + " frames, got " +
                          std::to_string(TT));
    }
    Var<T> h = bn_(conv_(x), training);
    h = ad::max_pool2d(h, h->value.dim(2), 1, 1, 1);
    return ad::sigmoid(ad::reshape(proj_(h), {B, N}));
}

// ---------------------------------------------------------------------------
// Temporal attention
// ---------------------------------------------------------------------------

template <class T>
TemporalAttentionNet<T>::TemporalAttentionNet(ParamStore<T>& store, const std::string& prefix, int blocks,
                                              int channels, int hidden, bool block_major, int frames)
    : blocks_(blocks), channels_(channels), hidden_(hidden), frames_(frames), block_major_(block_major) {
    if (hidden < 1) throw usage_error("lstm_hidden must be positive");
    const int in = block_major ? frames * channels : blocks * channels;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    lstm_.hidden = hidden;
    lstm_.w_ih = store.make(prefix + ".lstm.w_ih", {4 * hidden, in}, Init::Uniform, bound);
    lstm_.w_hh = store.make(prefix + ".lstm.w_hh", {4 * hidden, hidden}, Init::Uniform, bound);
    lstm_.bias = store.make(prefix + ".lstm.b", {4 * hidden}, Init::Zeros);
    for (int j = hidden; j < 2 * hidden; ++j) lstm_.bias->value.data[j] = T(1);  // forget gate
    head_ = make_dense(store, prefix + ".head", hidden, block_major ? frames : 1);
}

template <class T>
Var<T> TemporalAttentionNet<T>::operator()(const Var<T>& x) const {
    const int B = x->value.dim(0), C = x->value.dim(1), TT = x->value.dim(2), N = x->value.dim(3);
    if (N != blocks_ || C != channels_) {
        throw usage_error("temporal attention built for N=" + std::to_string(blocks_) + ", C=" +
                          std::to_string(channels_) + ", got " + ad::shape_str(x->shape()));
    }
    Var<T> h = ad::constant(Tensor<T>({B, hidden_}, T(0)));
    Var<T> c = h;
    if (block_major_) {
        if (TT != frames_) throw usage_error("block-major temporal attention is fixed to T=" + std::to_string(frames_));
        const Var<T> flat = ad::reshape(ad::permute(x, {0, 3, 2, 1}), {B, N * TT * C});
        for (int n = 0; n < N; ++n) std::tie(h, c) = ad::lstm_step(ad::slice_cols(flat, n * TT * C, TT * C), h, c, lstm_);
        return ad::sigmoid(head_(h));
    }
    const int step = N * C;
    const Var<T> flat = ad::reshape(ad::permute(x, {0, 2, 3, 1}), {B, TT * step});
    std::vector<Var<T>> scores;
    scores.reserve(static_cast<std::size_t>(TT));
    for (int i = 0; i < TT; ++i) {
        std::tie(h, c) = ad::lstm_step(ad::slice_cols(flat, i * step, step), h, c, lstm_);
        scores.push_back(head_(h));
    }
    return ad::sigmoid(ad::concat_cols(scores));
}

// ---------------------------------------------------------------------------
// Meso4
// ---------------------------------------------------------------------------

template <class T>
Meso4<T>::Meso4(ParamStore<T>& store, const std::string& prefix, int input_size) : size_(input_size) {
    if (input_size < 32 || input_size % 32 != 0) throw usage_error("meso_input must be a positive multiple of 32");
    c1_ = make_conv(store, prefix + ".c1", 3, 8, 3, 3, {1, 1, 1, 1}, true);
    b1_ = make_batch_norm(store, prefix + ".bn1", 8);
    c2_ = make_conv(store, prefix + ".c2", 8, 8, 5, 5, {1, 1, 2, 2}, true);
    b2_ = make_batch_norm(store, prefix + ".bn2", 8);
    c3_ = make_conv(store, prefix + ".c3", 8, 16, 5, 5, {1, 1, 2, 2}, true);
    b3_ = make_batch_norm(store, prefix + ".bn3", 16);
    c4_ = make_conv(store, prefix + ".c4", 16, 16, 5, 5, {1, 1, 2, 2}, true);
    b4_ = make_batch_norm(store, prefix + ".bn4", 16);
    const int side = input_size / 32;
    d1_ = make_dense(store, prefix + ".fc1", 16 * side * side, 16);
    d2_ = make_dense(store, prefix + ".fc2", 16, 1);
}

template <class T>
Var<T> Meso4<T>::operator()(const Var<T>& x, bool training) const {
    if (x->value.rank() != 4 || x->value.dim(1) != 3 || x->value.dim(2) != size_ || x->value.dim(3) != size_) {
        throw usage_error("meso expects [B,3," + std::to_string(size_) + "," + std::to_string(size_) + "], got " +
                          ad::shape_str(x->shape()));
    }
    Var<T> h = ad::max_pool2d(b1_(ad::relu(c1_(x)), training), 2, 2, 2, 2);
    h = ad::max_pool2d(b2_(ad::relu(c2_(h)), training), 2, 2, 2, 2);
    h = ad::max_pool2d(b3_(ad::relu(c3_(h)), training), 2, 2, 2, 2);
    h = ad::max_pool2d(b4_(ad::relu(c4_(h)), training), 4, 4, 4, 4);
    const int B = x->value.dim(0);
    h = ad::reshape(h, {B, static_cast<int>(h->value.size()) / B});
    return d2_(ad::leaky_relu(d1_(h), T(0.1)));
}

// ---------------------------------------------------------------------------
// Residual classifier
// ---------------------------------------------------------------------------

template <class T>
BasicBlock<T>::BasicBlock(ParamStore<T>& store, const std::string& prefix, int in, int out, int stride)
    : project_(stride != 1 || in != out) {
    c1_ = make_conv(store, prefix + ".c1", in, out, 3, 3, {stride, stride, 1, 1}, false);
    b1_ = make_batch_norm(store, prefix + ".bn1", out);
    c2_ = make_conv(store, prefix + ".c2", out, out, 3, 3, {1, 1, 1, 1}, false);
    b2_ = make_batch_norm(store, prefix + ".bn2", out);
    if (project_) {
        cs_ = make_conv(store, prefix + ".short", in, out, 1, 1, {stride, stride, 0, 0}, false);
        bs_ = make_batch_norm(store, prefix + ".short_bn", out);
    }
}

template <class T>
Var<T> BasicBlock<T>::operator()(const Var<T>& x, bool training) const {
    const Var<T> h = b2_(c2_(ad::relu(b1_(c1_(x), training))), training);
    const Var<T> skip = project_ ? bs_(cs_(x), training) : x;
    return ad::relu(ad::add(h, skip));
}

template <class T>
ResidualClassifier<T>::ResidualClassifier(ParamStore<T>& store, const std::string& prefix, int in_channels,
                                          int width) {
    if (width < 1) throw usage_error("classifier_width must be positive");
    stem_ = make_conv(store, prefix + ".stem", in_channels, width, 3, 3, {2, 1, 1, 1}, false);
    stem_bn_ = make_batch_norm(store, prefix + ".stem_bn", width);
    int in = width;
    for (int s = 0; s < 4; ++s) {
        const int out = width << s;
        for (int b = 0; b < 2; ++b) {
            const std::string name = prefix + ".s" + std::to_string(s + 1) + "b" + std::to_string(b + 1);
            blocks_.emplace_back(store, name, in, out, (b == 0 && s > 0) ? 2 : 1);
            in = out;
        }
    }
    head_ = make_dense(store, prefix + ".fc", in, 2);
}

template <class T>
Var<T> ResidualClassifier<T>::operator()(const Var<T>& x, bool training) const {
    Var<T> h = ad::relu(stem_bn_(stem_(x), training));
    for (const auto& block : blocks_) h = block(h, training);
    return head_(ad::global_avg_pool(h));
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

Ablation Ablation::parse(const std::string& text) {
    Ablation a;
    a.mm = false;
    std::string token;
    std::string normalized = text;
    std::replace(normalized.begin(), normalized.end(), ',', ' ');
    std::istringstream in(normalized);
    while (in >> token) {
        if (token == "mm") a.mm = true;
        else if (token == "A") a.A = true;
        else if (token == "P") a.P = true;
        else if (token == "B") a.B = true;
        else if (token == "F") a.F = true;
        else if (token == "e2e") a.e2e = true;
        else throw usage_error("unknown ablation flag '" + token + "' (expected mm, A, P, B, F, e2e)");
    }
    return a;
}

std::string Ablation::str() const {
    std::string s;
    auto put = [&](bool on, const char* t) {
        if (!on) return;
        if (!s.empty()) s += ',';
        s += t;
    };
    put(mm, "mm");
    put(A, "A");
    put(P, "P");
    put(B, "B");
    put(F, "F");
    put(e2e, "e2e");
    return s;
}

std::string Ablation::name() const {
    std::string s = mm ? "DR-mmst" : "DR-st";
    std::string parts;
    if (A) parts += 'A';
    if (P) parts += 'P';
    if (B) parts += 'B';
    if (F) parts += 'F';
    if (!parts.empty()) s += "-" + parts;
    if (e2e && any_attention()) s += "-e2e";
    return s;
}

std::vector<Ablation> ablation_ladder() {
    return {Ablation::parse(""),          Ablation::parse("mm"),        Ablation::parse("mm,A"),
            Ablation::parse("mm,B"),      Ablation::parse("mm,A,P"),    Ablation::parse("mm,B,F"),
            Ablation::parse("mm,A,P,B,F"), Ablation::parse("mm,A,P,B,F,e2e")};
}

void NetConfig::validate() const {
    if (blocks < 1 || channels < 1 || frames < 1) throw usage_error("network: blocks, channels and frames must be positive");
    if (lstm_hidden < 1) throw usage_error("lstm_hidden must be positive");
    if (classifier_width < 1) throw usage_error("classifier_width must be positive");
    if (sa_kernel < 1 || sa_channels < 1) throw usage_error("spatial attention kernel/channels must be positive");
    if (meso_input < 32 || meso_input % 32 != 0) throw usage_error("meso_input must be a positive multiple of 32");
}

std::vector<float> fuse(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw usage_error("attention length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    std::vector<float> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

// ---------------------------------------------------------------------------
// Fused model
// ---------------------------------------------------------------------------

template <class T>
DualStAttenNet<T>::DualStAttenNet(const NetConfig& cfg, const Ablation& ablation, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      ablation_(ablation),
      store_(seed),
      sa_(store_, "sa", cfg.channels, cfg.sa_kernel, cfg.sa_channels),
      tb_(store_, "tb", cfg.blocks, cfg.channels, cfg.lstm_hidden, cfg.block_major, cfg.frames),
      meso_(store_, "meso", cfg.meso_input),
      phi_(store_, "phi", cfg.channels, cfg.classifier_width) {}

template <class T>
Attention<T> DualStAttenNet<T>::attention(const Var<T>& x, const Var<T>& s_p, const Var<T>& t_f,
                                          bool training) const {
    if (x->value.rank() != 4 || x->value.dim(1) != cfg_.channels || x->value.dim(3) != cfg_.blocks) {
        throw usage_error("model built for C=" + std::to_string(cfg_.channels) + ", N=" + std::to_string(cfg_.blocks) +
                          ", got X " + ad::shape_str(x->shape()));
    }
    const int B = x->value.dim(0), TT = x->value.dim(2), N = x->value.dim(3);
    Attention<T> att;
    if (ablation_.A) att.s_a = sa_(x, training);
    if (ablation_.B) att.t_b = tb_(x);
    if (ablation_.P && s_p->shape() != Shape{B, N}) throw usage_error("s_p must be [B, N]");
    if (ablation_.F && t_f->shape() != Shape{B, TT}) throw usage_error("t_f must be [B, T]");

    if (ablation_.A && ablation_.P) att.s = ad::add(att.s_a, s_p);
    else if (ablation_.A) att.s = att.s_a;
    else if (ablation_.P) att.s = s_p;
    else att.s = ad::constant(Tensor<T>({B, N}, T(1)));

    if (ablation_.B && ablation_.F) att.t = ad::add(att.t_b, t_f);
    else if (ablation_.B) att.t = att.t_b;
    else if (ablation_.F) att.t = t_f;
    else att.t = ad::constant(Tensor<T>({B, TT}, T(1)));
    return att;
}

template <class T>
Var<T> DualStAttenNet<T>::logits(const Var<T>& x, const Var<T>& s_p, const Var<T>& t_f, bool training) const {
    if (!ablation_.any_attention()) return phi_(x, training);
    const Attention<T> att = attention(x, s_p, t_f, training);
    return phi_(ad::apply_attention(x, att.s, att.t), training);
}

template <class T>
std::vector<std::string> DualStAttenNet<T>::stage2_prefixes(bool attention_only) const {
    std::vector<std::string> p;
    if (!attention_only) p.push_back("phi.");
    if (ablation_.A) p.push_back("sa.");
    if (ablation_.B) p.push_back("tb.");
    return p;
}

#define DEEPRHYTHM_NN_INSTANTIATE(T)                                                                         \
    template class ParamStore<T>;                                                                            \
    template std::vector<CheckpointTensor> export_params<T>(const ParamStore<T>&);                           \
    template void import_params<T>(ParamStore<T>&, const std::vector<CheckpointTensor>&);                    \
    template Conv<T> make_conv<T>(ParamStore<T>&, const std::string&, int, int, int, int, ad::Conv2dOptions, \
                                  bool);                                                                     \
    template BatchNorm<T> make_batch_norm<T>(ParamStore<T>&, const std::string&, int);                       \
    template Dense<T> make_dense<T>(ParamStore<T>&, const std::string&, int, int);                           \
    template class SpatialAttentionNet<T>;                                                                   \
    template class TemporalAttentionNet<T>;                                                                  \
    template class Meso4<T>;                                                                                 \
    template class BasicBlock<T>;                                                                            \
    template class ResidualClassifier<T>;                                                                    \
    template class DualStAttenNet<T>;

DEEPRHYTHM_NN_INSTANTIATE(float)
DEEPRHYTHM_NN_INSTANTIATE(double)

}  // namespace deeprhythm::nn
