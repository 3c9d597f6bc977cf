#include "deeprhythm/geometry.hpp"
#include "deeprhythm/media_io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace deeprhythm {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Relative pulse strength per RGB channel (blood volume shows mostly in green).
constexpr double kPulseMix[3] = {0.35, 1.0, 0.55};
constexpr double kTextureNoise = 0.05;
constexpr int kTextureGrid = 12;

std::mt19937_64 frame_stream(std::uint64_t seed, int frame, std::uint32_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(frame), salt};
    return std::mt19937_64(seq);
}

struct FaceModel {
    double cx = 0.0, cy = 0.0, a = 0.0, b = 0.0;
    double skin[3] = {0.0, 0.0, 0.0};
    double eye[3] = {0.22, 0.18, 0.17};
    double lip[3] = {0.0, 0.0, 0.0};
    double bg[3] = {0.0, 0.0, 0.0};
    std::vector<double> texture;  // kTextureGrid^2, smooth skin albedo variation
    Landmarks base{};
    geometry::Polygon right_eye, left_eye;

    double texture_at(double u, double v) const {
        // u, v in [-1, 1] -> bilinear lookup
        const double gx = std::clamp((u + 1.0) / 2.0 * (kTextureGrid - 1), 0.0, kTextureGrid - 1.0);
        const double gy = std::clamp((v + 1.0) / 2.0 * (kTextureGrid - 1), 0.0, kTextureGrid - 1.0);
        const int x0 = std::min(static_cast<int>(gx), kTextureGrid - 2);
        const int y0 = std::min(static_cast<int>(gy), kTextureGrid - 2);
        const double fx = gx - x0, fy = gy - y0;
        auto t = [&](int y, int x) { return texture[static_cast<std::size_t>(y) * kTextureGrid + x]; };
        return (1 - fy) * ((1 - fx) * t(y0, x0) + fx * t(y0, x0 + 1)) +
               fy * ((1 - fx) * t(y0 + 1, x0) + fx * t(y0 + 1, x0 + 1));
    }
};

}  // namespace

void SynthSpec::validate() const {
    if (height < 32 || width < 32) throw usage_error("synthetic frames must be at least 32x32");
    if (frames < 1) throw usage_error("synthetic video needs at least one frame");
    if (!(fps > 0.0)) throw usage_error("fps must be positive");
    if (!(pulse_freq > 0.0 && pulse_freq < fps / 2.0)) {
        throw usage_error("pulse_freq must lie in (0, fps/2)");
    }
    if (!(pulse_amp >= 0.0)) throw usage_error("pulse_amp must be non-negative");
    if (!(motion_jitter >= 0.0) || !(sensor_noise >= 0.0) || !std::isfinite(illum_drift)) {
        throw usage_error("invalid jitter/noise/drift");
    }
    if (scramble_grid < 2) throw usage_error("scramble_grid must be at least 2");
    if (label == Label::Real && disruption != Disruption::None) {
        throw usage_error("real videos cannot carry a disruption");
    }
    if (label == Label::Fake && disruption == Disruption::None) {
        throw usage_error("fake videos need a disruption");
    }
}

Landmarks synthetic_landmarks(double cx, double cy, double a, double b) {
    Landmarks p{};
    const double pi = std::numbers::pi;
    // Jaw: left ear level, down around the chin, to the right ear level.
    for (int k = 0; k < 17; ++k) {
        const double t = pi - pi * k / 16.0;
        p[k] = {cx + a * std::cos(t), cy + b * std::sin(t)};
    }
    // Brows.
    for (int k = 0; k < 5; ++k) {
        const double s = k / 4.0;
        const double lift = 0.05 * b * std::sin(pi * s);
        p[17 + k] = {cx - 0.78 * a + 0.58 * a * s, cy - 0.42 * b - lift};
        p[22 + k] = {cx + 0.20 * a + 0.58 * a * s, cy - 0.42 * b - lift};
    }
    // Nose bridge and tip.
    p[27] = {cx, cy - 0.25 * b};
    p[28] = {cx, cy - 0.08 * b};
    p[29] = {cx, cy + 0.05 * b};
    p[30] = {cx, cy + 0.16 * b};
    for (int k = 0; k < 5; ++k) {
        p[31 + k] = {cx + (k - 2) * 0.08 * a, cy + 0.24 * b + (k == 2 ? 0.02 * b : 0.0)};
    }
    // Eyes: corners at +-0.70a (outer) and +-0.24a (inner), level cy - 0.25b.
    const double half_w = 0.23 * a, half_h = 0.07 * b, ey = cy - 0.25 * b;
    const double rx = cx - 0.47 * a, lx = cx + 0.47 * a;
    p[36] = {rx - half_w, ey};
    p[37] = {rx - half_w / 3, ey - half_h};
    p[38] = {rx + half_w / 3, ey - half_h};
    p[39] = {rx + half_w, ey};
    p[40] = {rx + half_w / 3, ey + half_h};
    p[41] = {rx - half_w / 3, ey + half_h};
    p[42] = {lx - half_w, ey};
    p[43] = {lx - half_w / 3, ey - half_h};
    p[44] = {lx + half_w / 3, ey - half_h};
    p[45] = {lx + half_w, ey};
    p[46] = {lx + half_w / 3, ey + half_h};
    p[47] = {lx - half_w / 3, ey + half_h};
    // Lips.
    const double my = cy + 0.52 * b;
    for (int k = 0; k < 12; ++k) {
        const double t = pi - kTwoPi * k / 12.0;
        p[48 + k] = {cx + 0.32 * a * std::cos(t), my - 0.10 * b * std::sin(t)};
    }
    for (int k = 0; k < 8; ++k) {
        const double t = pi - kTwoPi * k / 8.0;
        p[60 + k] = {cx + 0.20 * a * std::cos(t), my - 0.04 * b * std::sin(t)};
    }
    // Forehead arc completes the contour above the ear line.
    for (int k = 0; k < 13; ++k) {
        const double t = pi * (k + 0.5) / 13.0;
        p[68 + k] = {cx + a * std::cos(t), cy - b * std::sin(t)};
    }
    return p;
}

SyntheticVideo synth_video(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const int H = spec.height, W = spec.width, G = spec.scramble_grid;

    FaceModel face;
    face.a = 0.30 * W;
    face.b = 0.38 * H;
    face.cx = W / 2.0 + (unit(rng) - 0.5) * 0.06 * W;
    face.cy = H / 2.0 + (unit(rng) - 0.5) * 0.06 * H;
    const double skin_base[3] = {0.72, 0.52, 0.42};
    for (int c = 0; c < 3; ++c) {
        face.skin[c] = skin_base[c] + (unit(rng) - 0.5) * 0.10;
        face.lip[c] = face.skin[c] * (c == 0 ? 0.95 : 0.70);
        face.bg[c] = 0.25 + 0.4 * unit(rng);
    }
    face.texture.resize(kTextureGrid * kTextureGrid);
    for (double& t : face.texture) t = 0.02 * gauss(rng);
    face.base = synthetic_landmarks(face.cx, face.cy, face.a, face.b);
    face.right_eye = geometry::right_eye(face.base);
    face.left_eye = geometry::left_eye(face.base);

    const double pulse_phase = kTwoPi * unit(rng);
    std::vector<double> block_phase(static_cast<std::size_t>(G) * G, pulse_phase);
    if (spec.disruption == Disruption::PhaseScramble) {
        for (double& ph : block_phase) ph = kTwoPi * unit(rng);
    }
    // block_texture: a 2x2-block patch inside the face grid is re-rendered
    // every frame without the pulse and with fresh high-frequency texture.
    int patch_r0 = -1, patch_c0 = -1;
    if (spec.disruption == Disruption::BlockTexture) {
        patch_r0 = 1 + static_cast<int>(unit(rng) * std::max(1, G - 3));
        patch_c0 = static_cast<int>(unit(rng) * (G - 1));
    }
    const double amplitude = spec.disruption == Disruption::Flatten ? 0.0 : spec.pulse_amp;
    const double drift_sign = unit(rng) < 0.5 ? -1.0 : 1.0;

    SyntheticVideo out;
    out.label = spec.label;
    out.seq.fps = spec.fps;
    out.seq.source_id = "synth_" + std::to_string(spec.seed);
    out.seq.frames.reserve(spec.frames);
    out.track.points.reserve(spec.frames);

    std::vector<double> block_wave(block_phase.size());
    for (int i = 0; i < spec.frames; ++i) {
        auto motion_rng = frame_stream(spec.seed, i, 0x6d6f7469u);
        auto noise_rng = frame_stream(spec.seed, i, 0x6e6f6973u);
        std::normal_distribution<double> motion_gauss(0.0, 1.0), noise_gauss(0.0, 1.0);
        const double jx = spec.motion_jitter * motion_gauss(motion_rng);
        const double jy = spec.motion_jitter * motion_gauss(motion_rng);
        const double t = i / spec.fps;
        const double drift = drift_sign * spec.illum_drift * (i - spec.frames / 2.0);
        for (std::size_t k = 0; k < block_phase.size(); ++k) {
            block_wave[k] = amplitude * std::sin(kTwoPi * spec.pulse_freq * t + block_phase[k]);
        }

        Landmarks lm = face.base;
        for (Point2& p : lm) {
            p.x = std::clamp(p.x + jx, 0.0, static_cast<double>(W));
            p.y = std::clamp(p.y + jy, 0.0, static_cast<double>(H));
        }
        out.track.points.emplace_back(lm);

        Image frame(H, W, 3);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                // Sample the face model in its own (unjittered) coordinates.
                const Point2 q{x + 0.5 - jx, y + 0.5 - jy};
                const double u = (q.x - face.cx) / face.a;
                const double v = (q.y - face.cy) / face.b;
                const double r2 = u * u + v * v;
                double rgb[3];
                if (r2 > 1.0) {
                    const double ramp = 0.15 * (static_cast<double>(y) / H - 0.5);
                    for (int c = 0; c < 3; ++c) rgb[c] = face.bg[c] + ramp;
                } else if (geometry::contains(face.right_eye, q) || geometry::contains(face.left_eye, q)) {
                    for (int c = 0; c < 3; ++c) rgb[c] = face.eye[c];
                } else {
                    const int col = std::clamp(static_cast<int>((u + 1.0) / 2.0 * G), 0, G - 1);
                    const int row = std::clamp(static_cast<int>((v + 1.0) / 2.0 * G), 0, G - 1);
                    const bool in_patch = patch_r0 >= 0 && row >= patch_r0 && row < patch_r0 + 2 &&
                                          col >= patch_c0 && col < patch_c0 + 2;
                    const double shade = 1.0 - 0.2 * r2;
                    const double albedo = face.texture_at(u, v);
                    const double lips_v = (v - 0.52) / 0.10, lips_u = u / 0.32;
                    const bool on_lips = lips_u * lips_u + lips_v * lips_v <= 1.0;
                    const double wave = in_patch ? 0.0 : block_wave[static_cast<std::size_t>(row) * G + col];
                    for (int c = 0; c < 3; ++c) {
                        const double base = on_lips ? face.lip[c] : face.skin[c];
                        rgb[c] = base * shade + albedo + kPulseMix[c] * wave;
                    }
                    if (in_patch) {
                        for (double& value : rgb) value += kTextureNoise * noise_gauss(noise_rng);
                    }
                }
                for (int c = 0; c < 3; ++c) {
                    double value = rgb[c] + drift;
                    if (spec.sensor_noise > 0.0) value += spec.sensor_noise * noise_gauss(noise_rng);
                    frame.at(y, x, c) = std::clamp(value, 0.0, 1.0);
                }
            }
        }
        out.seq.frames.push_back(std::move(frame));
    }
    return out;
}

}  // namespace deeprhythm
