// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   deeprhythm_acceptance [--only 1,2,...] [--work DIR] [--keep]
//
// Criteria 1-5 run in process against the core library; 6-9 drive the
// shared C API the same way the CLI does.

#include "deeprhythm/autodiff.hpp"
#include "deeprhythm/deeprhythm.h"
#include "deeprhythm/magnify.hpp"
#include "deeprhythm/mmstr.hpp"
#include "deeprhythm/network.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace deeprhythm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> sine(int T, double fps, double hz, double amp = 1.0) {
    std::vector<double> s(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) s[i] = amp * std::sin(2.0 * std::numbers::pi * hz * i / fps);
    return s;
}

double tone_amplitude(const std::vector<double>& s, double fps, double hz) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        a += s[i] * std::sin(2.0 * std::numbers::pi * hz * i / fps);
        b += s[i] * std::cos(2.0 * std::numbers::pi * hz * i / fps);
    }
    return 2.0 * std::hypot(a, b) / s.size();
}

// ---------------------------------------------------------------------------

Outcome bandpass_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const int T = 300;
    const double fps = 30.0, lo = 0.75, hi = 4.0;
    double worst_in = 0.0, worst_out = 0.0, worst_lin = 0.0;
    for (double hz : {0.8, 1.2, 2.5, 3.9}) {
        const auto s = sine(T, fps, hz);
        worst_in = std::max(worst_in, oracle::rms_diff(ideal_bandpass(s, fps, lo, hi), s));
    }
    for (double hz : {0.3, 5.0, 10.0, 14.0}) worst_out = std::max(worst_out, oracle::rms(ideal_bandpass(sine(T, fps, hz), fps, lo, hi)));
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> x(T), y(T), mix(T), lin(T);
        for (int i = 0; i < T; ++i) x[i] = g(rng), y[i] = g(rng);
        const double a = g(rng), b = g(rng);
        for (int i = 0; i < T; ++i) mix[i] = a * x[i] + b * y[i];
        const auto bx = ideal_bandpass(x, fps, lo, hi), by = ideal_bandpass(y, fps, lo, hi);
        for (int i = 0; i < T; ++i) lin[i] = a * bx[i] + b * by[i];
        worst_lin = std::max(worst_lin, oracle::rms_diff(ideal_bandpass(mix, fps, lo, hi), lin));
    }
    const double secs = seconds_since(t0);
    return {worst_in < 1e-6 && worst_out < 1e-6 && worst_lin < 1e-9 && secs < 10.0,
            "in-band rms " + fmt("%.2e", worst_in) + ", out-of-band rms " + fmt("%.2e", worst_out) + ", linearity " +
                fmt("%.2e", worst_lin) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome magnification_gain() {
    const auto t0 = std::chrono::steady_clock::now();
    const int T = 150;
    MagnifyParams p;
    p.alpha = 10.0;
    const double expected = uniform_gain(p);
    const auto signal = sine(T, 30.0, 1.4, 0.002);
    FrameSequence seq;
    seq.fps = 30.0;
    for (int i = 0; i < T; ++i) seq.frames.emplace_back(48, 48, 3, 0.5 + signal[i]);
    const FrameSequence out = magnify_video(seq, p);
    double worst = 0.0;
    for (int y : {0, 13, 24, 47})
        for (int x : {0, 30, 47})
            for (int c = 0; c < 3; ++c) {
                std::vector<double> s;
                for (const Image& f : out.frames) s.push_back(f.at(y, x, c) - 0.5);
                worst = std::max(worst, std::abs(tone_amplitude(s, 30.0, 1.4) / 0.002 - expected) / expected);
            }

    std::mt19937_64 rng(3);
    FrameSequence noisy;
    noisy.fps = 30.0;
    for (int i = 0; i < 40; ++i) noisy.frames.push_back(oracle::random_image(24, 24, rng));
    MagnifyParams zero;
    zero.alpha = 0.0;
    const bool identity = magnify_video(noisy, zero).frames == noisy.frames;
    const double secs = seconds_since(t0);
    return {worst <= 0.10 && identity && secs < 30.0,
            "gain " + fmt("%.3f", expected) + " within " + fmt("%.2e", worst) + " relative, alpha=0 identity " +
                (identity ? "exact" : "BROKEN") + ", " + fmt("%.2f", secs) + " s"};
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome pooling_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    long masked_pixels = 0;
    int cells = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const int T = 2 + trial % 5;
        const double cx = 8 + u(rng) - 0.5, cy = 8 + u(rng) - 0.5;
        const double a = 4.5 + 2 * u(rng), b = 5.5 + 1.5 * u(rng);
        FrameSequence seq;
        seq.fps = 30.0;
        LandmarkTrack track;
        std::vector<double> x0, y0, x1, y1;
        for (int t = 0; t < T; ++t) {
            seq.frames.push_back(oracle::random_image(16, 16, rng));
            const Landmarks lm = synthetic_landmarks(cx + 0.6 * (u(rng) - 0.5), cy + 0.6 * (u(rng) - 0.5), a, b);
            track.points.emplace_back(lm);
            double bx0 = 1e9, by0 = 1e9, bx1 = -1e9, by1 = -1e9;
            for (const Point2& p : oracle::face_hull(lm)) {
                bx0 = std::min(bx0, p.x), by0 = std::min(by0, p.y);
                bx1 = std::max(bx1, p.x), by1 = std::max(by1, p.y);
            }
            x0.push_back(bx0), y0.push_back(by0), x1.push_back(bx1), y1.push_back(by1);
            const auto hull = oracle::face_hull(lm);
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) masked_pixels += !oracle::pixel_valid(lm, hull, y, x);
        }
        const GridSpec spec{2 + trial % 3, 2 + trial % 4};
        const MmstMap map = compute_mmst_map(seq, track, spec);
        const BoundingBox box{median(x0), median(y0), median(x1), median(y1)};
        for (int t = 0; t < T; ++t) {
            const auto ref = oracle::pooled_means(seq.frames[t], *track.points[t], box, spec.rows, spec.cols);
            for (int n = 0; n < spec.size(); ++n)
                for (int c = 0; c < 3; ++c, ++cells) worst = std::max(worst, std::abs(map.at(t, n, c) - ref[n * 3 + c]));
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-6 && masked_pixels > 0 && secs < 10.0,
            std::to_string(cells) + " cells, max |diff| " + fmt("%.2e", worst) + ", " + std::to_string(masked_pixels) +
                " masked pixels excluded, " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------

using ad::Var;
using DTensor = ad::Tensor<double>;

DTensor rand_t(ad::Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    DTensor t(std::move(s));
    for (double& v : t.data) v = u(rng);
    return t;
}

DTensor off_kink(ad::Shape s, std::mt19937_64& rng) {
    DTensor t = rand_t(std::move(s), rng, 0.1, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (double& v : t.data)
        if (coin(rng)) v = -v;
    return t;
}

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(4);
    std::map<std::string, double> worst;
    std::size_t coords = 0;
    auto run = [&](const std::string& op, const std::function<Var<double>()>& loss,
                   const std::vector<std::pair<std::string, Var<double>>>& in, ad::GradCheckOptions opt = {}) {
        const auto r = ad::grad_check(loss, in, opt);
        coords += r.coords;
        worst[op] = std::max(worst[op], r.max_rel_error);
    };
    auto probe = [](const Var<double>& y, const Var<double>& w) { return ad::sum(ad::mul(y, w)); };
    for (int trial = 0; trial < 2; ++trial) {
        const int B = 2 + trial, C = 3, H = 5 + trial, W = 4;
        const auto x = ad::parameter(off_kink({B, C, H, W}, rng));
        const auto pw = ad::constant(rand_t(x->shape(), rng));

        const auto w = ad::parameter(rand_t({3, C, 3, 2}, rng)), b = ad::parameter(rand_t({3}, rng));
        const ad::Conv2dOptions copt{trial + 1, 1, 1, trial};
        const auto pc = ad::constant(rand_t(ad::conv2d(x, w, b, copt)->shape(), rng));
        run("conv2d", [&] { return probe(ad::conv2d(x, w, b, copt), pc); }, {{"x", x}, {"w", w}, {"b", b}});

        const auto g = ad::parameter(rand_t({C}, rng, 0.5, 1.5)), be = ad::parameter(rand_t({C}, rng));
        for (bool train : {true, false}) {
            ad::BatchNormState<double> st(C);
            run("batch_norm", [&] { return probe(ad::batch_norm(x, g, be, st, train), pw); }, {{"x", x}, {"g", g}, {"b", be}});
        }
        run("relu", [&] { return probe(ad::relu(x), pw); }, {{"x", x}});
        run("leaky_relu", [&] { return probe(ad::leaky_relu(x, 0.1), pw); }, {{"x", x}});
        run("sigmoid", [&] { return probe(ad::sigmoid(x), pw); }, {{"x", x}});
        run("tanh", [&] { return probe(ad::tanh(x), pw); }, {{"x", x}});
        run("scale", [&] { return probe(ad::scale(x, -1.5), pw); }, {{"x", x}});
        const auto pm = ad::constant(rand_t(ad::max_pool2d(x, 2, 2, 2, 1)->shape(), rng));
        run("max_pool2d", [&] { return probe(ad::max_pool2d(x, 2, 2, 2, 1), pm); }, {{"x", x}});
        const auto pg = ad::constant(rand_t({B, C}, rng));
        run("global_avg_pool", [&] { return probe(ad::global_avg_pool(x), pg); }, {{"x", x}});
        const auto pp = ad::constant(rand_t({W, B, H, C}, rng));
        run("permute", [&] { return probe(ad::permute(x, {3, 0, 2, 1}), pp); }, {{"x", x}});
        const auto pr = ad::constant(rand_t({B, C * H * W}, rng));
        run("reshape", [&] { return probe(ad::reshape(x, {B, C * H * W}), pr); }, {{"x", x}});
        const auto a2 = ad::parameter(rand_t({B, 6}, rng)), c2 = ad::parameter(rand_t({B, 3}, rng));
        const auto ps = ad::constant(rand_t({B, 5}, rng));
        run("concat/slice", [&] { return probe(ad::slice_cols(ad::concat_cols<double>({a2, c2}), 2, 5), ps); },
            {{"a", a2}, {"c", c2}});
        const auto y = ad::parameter(rand_t(x->shape(), rng));
        run("add", [&] { return probe(ad::add(x, y), pw); }, {{"x", x}, {"y", y}});
        run("mul", [&] { return probe(ad::mul(x, y), pw); }, {{"x", x}, {"y", y}});
        const auto s = ad::parameter(rand_t({B, W}, rng)), t = ad::parameter(rand_t({B, H}, rng));
        run("apply_attention", [&] { return probe(ad::apply_attention(x, s, t), pw); }, {{"x", x}, {"s", s}, {"t", t}});
        const auto dw = ad::parameter(rand_t({4, C * H * W}, rng)), db = ad::parameter(rand_t({4}, rng));
        const auto xf = ad::parameter(rand_t({B, C * H * W}, rng));
        const auto pd = ad::constant(rand_t({B, 4}, rng));
        run("dense", [&] { return probe(ad::dense(xf, dw, db), pd); }, {{"x", xf}, {"w", dw}, {"b", db}});
        std::vector<int> labels;
        for (int k = 0; k < B; ++k) labels.push_back(k % 2);
        const auto z2 = ad::parameter(rand_t({B, 2}, rng, -2, 2)), z1 = ad::parameter(rand_t({B, 1}, rng, -2, 2));
        run("softmax_cross_entropy", [&] { return ad::softmax_cross_entropy(z2, std::span<const int>(labels)); }, {{"z", z2}});
        run("sigmoid_cross_entropy", [&] { return ad::sigmoid_cross_entropy(z1, std::span<const int>(labels)); }, {{"z", z1}});
        const int Hd = 3, steps = 4;
        ad::LstmParams<double> lp{ad::parameter(rand_t({4 * Hd, C}, rng)), ad::parameter(rand_t({4 * Hd, Hd}, rng)),
                                  ad::parameter(rand_t({4 * Hd}, rng)), Hd};
        const auto seq = ad::parameter(rand_t({B, steps * C}, rng));
        const auto ph = ad::constant(rand_t({B, Hd}, rng));
        run("lstm_step",
            [&] {
                Var<double> h = ad::constant(DTensor({B, Hd}, 0.0)), c = h;
                for (int k = 0; k < steps; ++k) std::tie(h, c) = ad::lstm_step(ad::slice_cols(seq, k * C, C), h, c, lp);
                return probe(h, ph);
            },
            {{"seq", seq}, {"w_ih", lp.w_ih}, {"w_hh", lp.w_hh}, {"b", lp.bias}});
    }

    // Full stage-two loss on a 10x8x3 toy map.
    std::mt19937_64 mrng(9);
    nn::NetConfig cfg;
    cfg.blocks = 8;
    cfg.frames = 10;
    cfg.sa_kernel = 5;
    cfg.sa_channels = 8;
    cfg.lstm_hidden = 4;
    cfg.classifier_width = 2;
    cfg.meso_input = 32;
    nn::DualStAttenNet<double> net(cfg, nn::Ablation::parse("mm,A,P,B,F,e2e"), 11);
    std::uniform_real_distribution<double> gu(0.5, 1.5), bu(-0.5, 0.5);
    for (const auto& [name, v] : net.store().named()) {
        if (name.ends_with(".gamma")) for (double& e : v->value.data) e = gu(mrng);
        if (name.ends_with(".beta")) for (double& e : v->value.data) e = bu(mrng);
    }
    const auto X = ad::parameter(rand_t({3, 3, 10, 8}, mrng, 0.0, 1.0));
    DTensor sp({3, 8}, 0.0);
    for (int k = 0; k < 3; ++k)
        for (int n : {1, 2, 3, 5, 6, 7}) sp.data[k * 8 + n] = 1.0;
    const auto s_p = ad::constant(sp);
    const auto t_f = ad::constant(rand_t({3, 10}, mrng, 0.0, 1.0));
    const std::vector<int> labels{0, 1, 1};
    std::vector<std::pair<std::string, Var<double>>> inputs{{"X", X}};
    for (const auto& [name, v] : net.store().named())
        if (!name.starts_with("meso.")) inputs.emplace_back(name, v);
    ad::GradCheckOptions opt;
    opt.max_coords_per_tensor = 12;
    opt.seed = 5;
    opt.h = 1e-6;
    opt.skip_kinks = true;
    const auto full = ad::grad_check(
        [&] { return ad::softmax_cross_entropy(net.logits(X, s_p, t_f, true), std::span<const int>(labels)); }, inputs, opt);
    coords += full.coords;
    worst["stage-2 loss"] = full.max_rel_error;

    double max_rel = 0.0;
    std::string worst_op;
    for (const auto& [op, e] : worst)
        if (e >= max_rel) max_rel = e, worst_op = op;
    const double secs = seconds_since(t0);
    return {max_rel < 1e-4 && full.skipped * 10 < full.coords + full.skipped && secs < 120.0,
            std::to_string(worst.size()) + " checks, " + std::to_string(coords) + " coords, max rel " +
                fmt("%.2e", max_rel) + " (" + worst_op + "), stage-2 loss " + fmt("%.2e", full.max_rel_error) + " with " +
                std::to_string(full.skipped) + " kink coords skipped, " + fmt("%.1f", secs) + " s"};
}

Outcome attention_algebra() {
    std::mt19937_64 rng(55);
    std::uniform_int_distribution<int> Td(1, 12), Nd(1, 9);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    int identical = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int T = Td(rng), N = Nd(rng), B = 1 + trial % 2;
        nn::NetConfig cfg;
        cfg.blocks = N;
        cfg.frames = T;
        cfg.classifier_width = 2;
        cfg.meso_input = 32;
        nn::DualStAttenNet<float> net(cfg, nn::Ablation::parse("mm"), 1000 + trial);
        ad::Tensor<float> x({B, 3, T, N}), s({B, N}), t({B, T});
        for (float& v : x.data) v = u(rng);
        for (float& v : s.data) v = 2.0f * u(rng);
        for (float& v : t.data) v = 2.0f * u(rng);
        ad::Tensor<float> ax = x;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < T; ++i)
                    for (int n = 0; n < N; ++n) {
                        const float a = t.data[b * T + i] * s.data[b * N + n];  // A = t s^T
                        ax.data[((b * 3 + c) * T + i) * N + n] *= a;
                    }
        const auto lhs = net.classify(ad::apply_attention(ad::constant(x), ad::constant(s), ad::constant(t)), false);
        const auto rhs = net.classify(ad::constant(ax), false);
        identical += lhs->value.data == rhs->value.data;
    }

    int six = 0, videos = 0;
    for (int k = 0; k < 12; ++k) {
        SynthSpec spec;
        spec.frames = 4;
        spec.height = spec.width = 96 + 16 * (k % 3);
        spec.seed = 700 + k;
        const SyntheticVideo v = synth_video(spec);
        for (GridSpec g : {GridSpec{5, 5}, GridSpec{3, 3}, GridSpec{7, 7}, GridSpec{4, 6}}) {
            const auto sp = prior_attention(prior_block_set(v.track, g), g.size());
            int ones = 0, zeros = 0;
            for (float e : sp) ones += e == 1.0f, zeros += e == 0.0f;
            six += ones == 6 && zeros == g.size() - 6;
            ++videos;
        }
    }
    return {identical == 100 && six == videos, std::to_string(identical) + "/100 bit-identical, s_p six ones on " +
                                                   std::to_string(six) + "/" + std::to_string(videos) + " (video, grid) pairs"};
}

// ---------------------------------------------------------------------------
// Pipeline criteria over the C API
// ---------------------------------------------------------------------------

void print_line(const char* line, void*) { std::fprintf(stderr, "  %s\n", line); }

struct Cfg {
    dr_config* p = nullptr;
    explicit Cfg(const std::string& json_text) {
        if (dr_config_from_json(json_text.c_str(), nullptr, &p) != DR_OK) {
            throw std::runtime_error(std::string("config: ") + dr_last_error());
        }
    }
    ~Cfg() { dr_config_free(p); }
    Cfg(const Cfg&) = delete;
    Cfg& operator=(const Cfg&) = delete;
};

void check(dr_status s, const std::string& what) {
    if (s != DR_OK) throw std::runtime_error(what + " failed (" + std::to_string(s) + "): " + dr_last_error());
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Byte comparison of every file under two trees (paths relative).
std::string tree_diff(const fs::path& a, const fs::path& b) {
    std::set<std::string> names;
    for (const auto& root : {a, b})
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).generic_string());
    for (const auto& n : names) {
        if (!fs::exists(a / n) || !fs::exists(b / n)) return n + " missing on one side";
        if (slurp(a / n) != slurp(b / n)) return n + " differs";
    }
    return "";
}

// Desk configuration for the 200-video corpus.
std::string corpus_config(std::uint64_t seed) {
    nlohmann::json j = {{"preset", "desk"},
                        {"seed", seed},
                        {"synth", {{"n_real", 100}, {"n_fake", 100}, {"frames", 150}, {"height", 128}, {"width", 128}, {"fps", 30.0}}},
                        {"sweep", {{"jpeg", {100, 60}}, {"blur", {1, 11}}, {"noise", {0, 15}}, {"sampling", {1, 10}}}}};
    return j.dump();
}

struct PipelineState {
    bool ran = false;
    std::string error;
    std::map<std::string, double> accuracy;  // variant -> test accuracy
    int n_test = 0;
    std::vector<std::string> absent;
    double seconds_to_e2e = 0.0;
    double e2e_accuracy = 0.0;
    int e2e_n = 0;
    nlohmann::json robustness;
    std::string robust_error;
};

void run_pipeline(const fs::path& work, PipelineState& st) {
    st.ran = true;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        Cfg cfg(corpus_config(7));
        fs::remove_all(work / "corpus");
        check(dr_synth(cfg.p, (work / "corpus").c_str()), "synth");
        check(dr_extract(cfg.p, (work / "corpus/manifest.json").c_str(), (work / "data").c_str()), "extract");
        // The configured variant is the full e2e model.
        check(dr_train(cfg.p, (work / "data").c_str(), (work / "model").c_str()), "train");
        check(dr_eval(cfg.p, (work / "data").c_str(), (work / "model").c_str(), (work / "eval").c_str(), "test",
                      &st.e2e_accuracy),
              "eval");
        st.seconds_to_e2e = seconds_since(t0);
        st.e2e_n = read_json(work / "eval/metrics.json")["n_videos"].get<int>();
        check(dr_ablation(cfg.p, (work / "data").c_str(), (work / "ablation").c_str()), "ablation");
        const auto rep = read_json(work / "ablation/ablation.json");
        for (const auto& r : rep["rows"]) {
            st.accuracy[r["condition"].get<std::string>()] = r["accuracy"].get<double>();
            st.n_test = r["n_videos"].get<int>();
        }
        for (const auto& a : rep["absent"]) st.absent.push_back(a["condition"].get<std::string>() + ": " + a["reason"].get<std::string>());
        if (dr_robustness(cfg.p, (work / "corpus/manifest.json").c_str(),
                          (work / "model").c_str(), (work / "robustness").c_str()) == DR_OK) {
            st.robustness = read_json(work / "robustness/robustness.json");
        } else {
            st.robust_error = dr_last_error();
        }
    } catch (const std::exception& e) {
        st.error = e.what();
    }
}

Outcome end_to_end(const PipelineState& st) {
    if (!st.error.empty()) return {false, st.error};
    return {st.e2e_accuracy >= 0.90 && st.seconds_to_e2e <= 1800.0,
            "DR-mmst-APBF-e2e test accuracy " + fmt("%.4f", st.e2e_accuracy) + " on " + std::to_string(st.e2e_n) +
                " videos (need >= 0.90); synth+extract+train+eval " + fmt("%.0f", st.seconds_to_e2e) + " s (budget 1800)"};
}

Outcome ablation_direction(const PipelineState& st) {
    if (!st.error.empty()) return {false, st.error};
    if (st.accuracy.size() != 8) {
        return {false, std::to_string(st.accuracy.size()) + "/8 variants reported" +
                           (st.absent.empty() ? std::string() : "; " + st.absent.front())};
    }
    const double st_acc = st.accuracy.at("DR-st"), mm = st.accuracy.at("DR-mmst"), e2e = st.accuracy.at("DR-mmst-APBF-e2e");
    double best_staged = 0.0;
    std::string best_name;
    for (const auto& [name, acc] : st.accuracy)
        if (name != "DR-mmst-APBF-e2e" && acc > best_staged) best_staged = acc, best_name = name;
    std::string rows;
    for (const auto& [name, acc] : st.accuracy) rows += " " + name + "=" + fmt("%.3f", acc);
    return {mm - st_acc >= 0.10 && e2e >= best_staged - 0.02,
            "DR-mmst - DR-st = " + fmt("%.3f", mm - st_acc) + " (need >= 0.10), e2e " + fmt("%.3f", e2e) + " vs best staged " +
                best_name + " " + fmt("%.3f", best_staged) + " (tolerance 0.02); " + std::to_string(st.n_test) +
                " test videos:" + rows};
}

Outcome robustness_ordering(const PipelineState& st) {
    if (!st.error.empty()) return {false, st.error};
    if (!st.robust_error.empty()) return {false, "robustness: " + st.robust_error};
    std::map<std::string, double> dist, acc;
    int n = 0;
    std::optional<double> base;
    for (const auto& r : st.robustness["rows"]) {
        if (r["degree"].is_null()) {
            base = r["accuracy"].get<double>();
            continue;
        }
        const std::string key = r["condition"].get<std::string>() + "(" + fmt("%g", r["degree"].get<double>()) + ")";
        dist[key] = r["mmst_rel_distance"].get<double>();
        acc[key] = r["accuracy"].get<double>();
        n = r["n_videos"].get<int>();
    }
    for (const char* k : {"jpeg(60)", "blur(11)", "noise(15)", "sampling(10)", "jpeg(100)", "blur(1)", "noise(0)", "sampling(1)"})
        if (!dist.count(k)) return {false, std::string("cell ") + k + " absent"};
    const double samp = dist["sampling(10)"];
    const bool order = dist["jpeg(60)"] < samp && dist["blur(11)"] < samp && dist["noise(15)"] < samp;
    if (!base) return {false, "undegraded row absent"};
    int identity_ok = 0;
    for (const char* k : {"jpeg(100)", "blur(1)", "noise(0)", "sampling(1)"}) identity_ok += acc[k] == *base;
    return {order && identity_ok == 4 && n >= 20,
            "distances over " + std::to_string(n) + " videos: jpeg(60) " + fmt("%.4f", dist["jpeg(60)"]) + ", blur(11) " +
                fmt("%.4f", dist["blur(11)"]) + ", noise(15) " + fmt("%.4f", dist["noise(15)"]) + ", sampling(10) " +
                fmt("%.4f", samp) + "; identity degrees match undegraded accuracy " + fmt("%.4f", *base) + " in " +
                std::to_string(identity_ok) + "/4"};
}

Outcome determinism(const fs::path& work) {
    // Every command twice on a small corpus; all outputs compared byte for byte.
    nlohmann::json j = {{"seed", 21},
                        {"synth", {{"n_real", 6}, {"n_fake", 6}, {"frames", 48}, {"height", 96}, {"width", 96}}},
                        {"sa_kernel", 5},
                        {"sa_channels", 8},
                        {"lstm_hidden", 4},
                        {"classifier_width", 4},
                        {"meso_input", 32},
                        {"max_epochs", 3},
                        {"meso", {{"epochs", 2}, {"frames_per_video", 2}}},
                        {"sweep", {{"jpeg", {60}}, {"blur", {11}}, {"noise", {15}}, {"sampling", {2}}}}};
    try {
        Cfg cfg(j.dump());
        std::vector<std::string> diffs;
        for (int run = 0; run < 2; ++run) {
            const fs::path r = work / ("det" + std::to_string(run));
            fs::remove_all(r);
            check(dr_synth(cfg.p, (r / "corpus").c_str()), "synth");
            check(dr_extract(cfg.p, (r / "corpus/manifest.json").c_str(), (r / "data").c_str()), "extract");
            check(dr_degrade(cfg.p, (r / "corpus/manifest.json").c_str(), "noise", 15, (r / "degraded").c_str(), 0), "degrade");
            check(dr_train(cfg.p, (r / "data").c_str(), (r / "model").c_str()), "train");
            check(dr_eval(cfg.p, (r / "data").c_str(), (r / "model").c_str(), (r / "eval").c_str(), "test", nullptr), "eval");
            check(dr_ablation(cfg.p, (r / "data").c_str(), (r / "ablation").c_str()), "ablation");
            check(dr_robustness(cfg.p, (r / "corpus/manifest.json").c_str(), (r / "model").c_str(), (r / "robustness").c_str()),
                  "robustness");
            check(dr_report(r.c_str(), (r / "report.md").c_str()), "report");
        }
        for (const char* part : {"corpus", "data", "degraded", "model", "eval", "ablation", "robustness"}) {
            const std::string d = tree_diff(work / "det0" / part, work / "det1" / part);
            if (!d.empty()) diffs.push_back(std::string(part) + "/" + d);
        }
        if (slurp(work / "det0/report.md") != slurp(work / "det1/report.md")) diffs.push_back("report.md");
        return {diffs.empty(), diffs.empty() ? "synth, extract, degrade, train, eval, ablation, robustness, report: outputs byte-identical across two runs"
                                             : "differences: " + diffs.front() + (diffs.size() > 1 ? " (+" + std::to_string(diffs.size() - 1) + " more)" : "")};
    } catch (const std::exception& e) {
        return {false, e.what()};
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    fs::path work = fs::temp_directory_path() / "deeprhythm_acceptance";
    bool keep = false;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string tok;
            while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
        } else if (a == "--work" && i + 1 < argc) {
            work = argv[++i];
        } else if (a == "--keep") {
            keep = true;
        } else {
            std::fprintf(stderr, "usage: %s [--only 1,2,...] [--work DIR] [--keep]\n", argv[0]);
            return 1;
        }
    }
    auto wanted = [&](int k) { return only.empty() || only.count(k); };
    fs::create_directories(work);
    if (std::getenv("DEEPRHYTHM_VERBOSE")) dr_set_logger(print_line, nullptr);
    // Report timestamps come from here, so reruns stay byte-identical.
    setenv("SOURCE_DATE_EPOCH", "0", 0);

    PipelineState pipeline;
    const std::vector<std::pair<int, std::pair<std::string, std::function<Outcome()>>>> criteria{
        {1, {"bandpass oracle", bandpass_oracle}},
        {2, {"magnification gain", magnification_gain}},
        {3, {"pooling oracle", pooling_oracle}},
        {4, {"gradient suite", gradient_suite}},
        {5, {"attention algebra", attention_algebra}},
        {6, {"end-to-end separability", [&] {
                 if (!pipeline.ran) run_pipeline(work, pipeline);
                 return end_to_end(pipeline);
             }}},
        {7, {"ablation direction", [&] {
                 if (!pipeline.ran) run_pipeline(work, pipeline);
                 return ablation_direction(pipeline);
             }}},
        {8, {"robustness ordering", [&] {
                 if (!pipeline.ran) run_pipeline(work, pipeline);
                 return robustness_ordering(pipeline);
             }}},
        {9, {"determinism", [&] { return determinism(work); }}},
    };

    int failed = 0;
    for (const auto& [k, c] : criteria) {
        if (!wanted(k)) continue;
        Outcome o;
        try {
            o = c.second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", k, c.first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    if (!keep) {
        std::error_code ec;
        fs::remove_all(work / "corpus", ec);
        fs::remove_all(work / "det0", ec);
        fs::remove_all(work / "det1", ec);
    }
    return failed ? 1 : 0;
}
