#include <doctest.h>

#include "deeprhythm/geometry.hpp"
#include "deeprhythm/media_io.hpp"
#include "deeprhythm/mmstr.hpp"
#include "oracles.hpp"

#include <cmath>
#include <fstream>
#include <random>

using namespace deeprhythm;
namespace fs = std::filesystem;

namespace {

Landmarks face_at(double cx, double cy, double half) {
    return synthetic_landmarks(cx, cy, half, half);
}

void write_sidecar(const fs::path& path, const std::vector<std::pair<int, Landmarks>>& records, int drop_last = 0) {
    std::ofstream out(path);
    out << "# test sidecar\n";
    for (const auto& [frame, lm] : records) {
        out << frame;
        for (int k = 0; k < kLandmarkCount - drop_last; ++k) out << ' ' << lm[k].x << ' ' << lm[k].y;
        out << '\n';
    }
}

FrameSequence constant_video(int T, int H, int W, double v) {
    FrameSequence s;
    s.fps = 30.0;
    s.source_id = "const";
    for (int i = 0; i < T; ++i) s.frames.emplace_back(H, W, 3, v);
    return s;
}

LandmarkTrack full_track(int T, const Landmarks& lm) {
    LandmarkTrack t;
    t.points.assign(static_cast<std::size_t>(T), lm);
    return t;
}

std::string error_text(auto&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

// Face-region mean green series using the first frame's mask.
std::vector<double> face_mean_series(const SyntheticVideo& v) {
    const FaceMask mask = face_mask(v.seq.height(), v.seq.width(), *v.track.points[0]);
    std::vector<double> out;
    for (const Image& f : v.seq.frames) {
        double s = 0.0;
        for (int y = 0; y < f.height; ++y)
            for (int x = 0; x < f.width; ++x)
                if (mask.at(y, x)) s += f.at(y, x, 1);
        out.push_back(s / mask.valid_count);
    }
    return out;
}

double psnr(const Image& a, const Image& b) {
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    mse /= a.data.size();
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace

TEST_SUITE("media_io") {

TEST_CASE("load_frame_sequence reads ordered white frames") {
    const fs::path dir = oracle::scratch_dir("load_white");
    for (int i = 0; i < 3; ++i) write_ppm(dir / ("00000" + std::to_string(i) + ".ppm"), Image(4, 4, 3, 1.0), 8);
    const FrameSequence seq = load_frame_sequence(dir, 30.0);
    CHECK(seq.size() == 3);
    for (const Image& f : seq.frames)
        for (double v : f.data) CHECK(v == 1.0);
}

TEST_CASE("load_frame_sequence rejects empty and mixed directories") {
    const fs::path empty = oracle::scratch_dir("load_empty");
    CHECK(error_text([&] { load_frame_sequence(empty, 30.0); }).find("no frames found") != std::string::npos);

    const fs::path mixed = oracle::scratch_dir("load_mixed");
    write_ppm(mixed / "000000.ppm", Image(4, 4, 3, 0.5));
    write_png(mixed / "000001.png", Image(8, 8, 3, 0.5));
    const std::string msg = error_text([&] { load_frame_sequence(mixed, 30.0); });
    CHECK(msg.find("inconsistent dimensions") != std::string::npos);
    CHECK(msg.find("000001.png") != std::string::npos);

    CHECK_THROWS_AS(load_frame_sequence(mixed / "nope", 30.0), Error);
}

TEST_CASE("frames round-trip through 16-bit PPM and PNG") {
    std::mt19937_64 rng(3);
    const Image img = oracle::random_image(5, 7, rng);
    const fs::path dir = oracle::scratch_dir("roundtrip");
    write_ppm(dir / "a.ppm", img, 16);
    write_png(dir / "b.png", img, 16);
    const Image a = read_image(dir / "a.ppm"), b = read_image(dir / "b.png");
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        CHECK(std::abs(a.data[i] - img.data[i]) <= 0.5 / 65535.0 + 1e-12);
        CHECK(std::abs(b.data[i] - img.data[i]) <= 0.5 / 65535.0 + 1e-12);
    }
}

TEST_CASE("landmark sidecar validity flags") {
    const fs::path dir = oracle::scratch_dir("sidecar");
    const Landmarks lm = face_at(50, 50, 20);
    write_sidecar(dir / "all.txt", {{0, lm}, {1, lm}, {2, lm}});
    CHECK(load_landmark_track(dir / "all.txt", 3, 100, 100).valid_flags() == std::vector<bool>{true, true, true});

    write_sidecar(dir / "gap.txt", {{0, lm}, {2, lm}});
    CHECK(load_landmark_track(dir / "gap.txt", 3, 100, 100).valid_flags() == std::vector<bool>{true, false, true});

    write_sidecar(dir / "short.txt", {{0, lm}}, 1);
    CHECK(error_text([&] { load_landmark_track(dir / "short.txt", 3, 100, 100); }).find("expected 81 landmarks") !=
          std::string::npos);

    write_sidecar(dir / "oob.txt", {{0, face_at(95, 50, 20)}});
    CHECK(error_text([&] { load_landmark_track(dir / "oob.txt", 3, 100, 100); }).find("out of frame bounds") !=
          std::string::npos);

    std::ofstream(dir / "junk.txt") << "0 1 2 three\n";
    CHECK_THROWS_AS(load_landmark_track(dir / "junk.txt", 3, 100, 100), Error);
}

TEST_CASE("landmark track save/load round trip") {
    const fs::path dir = oracle::scratch_dir("track_rt");
    LandmarkTrack t;
    t.points = {face_at(40, 40, 10), std::nullopt, face_at(41.25, 39.5, 10)};
    save_landmark_track(dir / "t.txt", t);
    const LandmarkTrack back = load_landmark_track(dir / "t.txt", 3, 100, 100);
    REQUIRE(back.valid_flags() == t.valid_flags());
    for (int k = 0; k < kLandmarkCount; ++k) {
        CHECK((*back.points[2])[k].x == (*t.points[2])[k].x);
        CHECK((*back.points[2])[k].y == (*t.points[2])[k].y);
    }
}

TEST_CASE("select_face rules") {
    SUBCASE("single candidate is kept") {
        const Landmarks a = face_at(30, 30, 10);
        const LandmarkTrack t = select_face({{a}, {a}});
        CHECK(t.valid_flags() == std::vector<bool>{true, true});
    }
    SUBCASE("nearest to previous centre") {
        const Landmarks near = face_at(52, 50, 10), far = face_at(90, 90, 10);
        const LandmarkTrack t = select_face({{far, near}}, Point2{50, 50});
        CHECK(landmark_bounds(*t.points[0]).center().x == doctest::Approx(52));
    }
    SUBCASE("first frame keeps the largest box") {
        const Landmarks small = face_at(30, 30, 10), big = face_at(70, 70, 15);  // areas 400 and 900
        CHECK(landmark_bounds(small).area() == doctest::Approx(400));
        CHECK(landmark_bounds(big).area() == doctest::Approx(900));
        const LandmarkTrack t = select_face({{small, big}});
        CHECK(landmark_bounds(*t.points[0]).area() == doctest::Approx(900));
    }
    SUBCASE("frames without candidates become invalid") {
        const LandmarkTrack t = select_face({{face_at(30, 30, 10)}, {}});
        CHECK(t.valid_flags() == std::vector<bool>{true, false});
    }
}

TEST_CASE("preprocess_video truncation, dropping and rejection") {
    const Landmarks lm = face_at(16, 16, 8);
    SUBCASE("400 valid frames keep 300") {
        const auto out = preprocess_video(constant_video(400, 4, 4, 0.5), full_track(400, lm));
        CHECK(out.seq.size() == 300);
        CHECK(out.track.size() == 300);
    }
    SUBCASE("60 invalid frames reject the video") {
        LandmarkTrack t = full_track(400, lm);
        for (int i = 0; i < 60; ++i) t.points[i * 5].reset();
        try {
            preprocess_video(constant_video(400, 4, 4, 0.5), t);
            FAIL("expected rejection");
        } catch (const VideoRejected& e) {
            CHECK(e.dropped() == 60);
        }
    }
    SUBCASE("10 invalid frames leave 290, idempotently") {
        LandmarkTrack t = full_track(400, lm);
        for (int i = 0; i < 10; ++i) t.points[i * 7].reset();
        for (int i = 300; i < 400; ++i) t.points[i].reset();  // beyond the window: irrelevant
        const auto once = preprocess_video(constant_video(400, 4, 4, 0.5), t);
        CHECK(once.seq.size() == 290);
        CHECK(once.dropped == 10);
        const auto twice = preprocess_video(once.seq, once.track);
        CHECK(twice.seq.size() == 290);
        CHECK(twice.dropped == 0);
        CHECK(twice.seq.frames == once.seq.frames);
    }
}

TEST_CASE("synth_video spectral behaviour") {
    SynthSpec spec;
    spec.frames = 300;
    spec.seed = 11;

    SUBCASE("zero amplitude gives flat block means") {
        spec.pulse_amp = 0.0;
        spec.motion_jitter = 0.0;
        spec.illum_drift = 0.0;
        spec.sensor_noise = 0.0;
        spec.frames = 40;
        const SyntheticVideo v = synth_video(spec);
        const MmstMap map = compute_mmst_map(v.seq, v.track, GridSpec{});
        for (int n = 0; n < map.N; ++n) {
            for (int c = 0; c < 3; ++c) {
                double mean = 0.0, var = 0.0;
                for (int t = 0; t < map.T; ++t) mean += map.at(t, n, c);
                mean /= map.T;
                for (int t = 0; t < map.T; ++t) var += (map.at(t, n, c) - mean) * (map.at(t, n, c) - mean);
                CHECK(var / map.T <= 1e-10);
            }
        }
    }
    SUBCASE("intact pulse dominates at 1.2 Hz, scrambling cancels it") {
        spec.illum_drift = 0.0;
        const auto intact = face_mean_series(synth_video(spec));
        CHECK(oracle::dominant_frequency(intact, spec.fps) == doctest::Approx(1.2));

        SynthSpec scrambled = spec;
        scrambled.label = Label::Fake;
        scrambled.disruption = Disruption::PhaseScramble;
        const auto broken = face_mean_series(synth_video(scrambled));
        CHECK(oracle::bin_power(broken, spec.fps, 1.2) <= 0.5 * oracle::bin_power(intact, spec.fps, 1.2));
    }
    SUBCASE("with drift the pulse still dominates the physiological band") {
        const auto s = face_mean_series(synth_video(spec));
        CHECK(oracle::dominant_frequency(s, spec.fps, 0.5) == doctest::Approx(1.2));
    }
}

TEST_CASE("synth_video determinism and ranges") {
    SynthSpec spec;
    spec.frames = 6;
    spec.seed = 5;
    const SyntheticVideo a = synth_video(spec), b = synth_video(spec);
    CHECK(a.seq.frames == b.seq.frames);
    spec.seed = 6;
    const SyntheticVideo c = synth_video(spec);
    CHECK(a.seq.frames != c.seq.frames);
    CHECK_NOTHROW(a.seq.validate());
    for (int i = 0; i < a.track.size(); ++i) CHECK(a.track.valid(i));

    SynthSpec bad;
    bad.label = Label::Real;
    bad.disruption = Disruption::Flatten;
    CHECK_THROWS_AS(synth_video(bad), Error);
    bad.label = Label::Fake;
    bad.disruption = Disruption::None;
    CHECK_THROWS_AS(synth_video(bad), Error);
}

TEST_CASE("degradations") {
    SynthSpec spec;
    spec.frames = 12;
    spec.height = spec.width = 48;
    const FrameSequence seq = synth_video(spec).seq;

    CHECK(degrade(seq, {DegradationKind::Blur, 1}).frames == seq.frames);
    CHECK(degrade(seq, {DegradationKind::Noise, 0}).frames == seq.frames);
    const FrameSequence same = degrade(seq, {DegradationKind::Sampling, 1});
    CHECK(same.frames == seq.frames);
    CHECK(same.fps == seq.fps);

    SUBCASE("sampling keeps ceil(T/K) frames") {
        FrameSequence long_seq = constant_video(300, 2, 2, 0.5);
        const FrameSequence s10 = degrade(long_seq, {DegradationKind::Sampling, 10});
        CHECK(s10.size() == 30);
        CHECK(s10.fps == doctest::Approx(3.0));
        for (int K : {1, 2, 3, 7, 11, 299, 300, 301}) {
            CHECK(degrade(long_seq, {DegradationKind::Sampling, static_cast<double>(K)}).size() == (300 + K - 1) / K);
        }
    }
    SUBCASE("jpeg quality 100 is near lossless") {
        for (const Image& f : seq.frames) CHECK(psnr(f, jpeg_roundtrip(f, 100)) > 45.0);
        CHECK(psnr(seq.frames[0], jpeg_roundtrip(seq.frames[0], 20)) < psnr(seq.frames[0], jpeg_roundtrip(seq.frames[0], 80)));
    }
    SUBCASE("quantization tables follow the quality scaling") {
        CHECK(jpeg_quant_table(50, false)[0] == 16);
        CHECK(jpeg_quant_table(100, false)[63] == 1);
        CHECK(jpeg_quant_table(10, false)[0] == 80);
        CHECK(jpeg_quant_table(90, true)[0] == 3);
        CHECK(jpeg_quant_table(1, true)[63] == 255);
    }
    SUBCASE("blur preserves constants and smooths") {
        const Image flat(9, 9, 3, 0.3);
        for (double v : gaussian_blur(flat, 5).data) CHECK(v == doctest::Approx(0.3).epsilon(1e-12));
        Image dot(9, 9, 3, 0.0);
        dot.at(4, 4, 0) = 1.0;
        const Image b = gaussian_blur(dot, 5);
        CHECK(b.at(4, 4, 0) < 1.0);
        CHECK(b.at(4, 5, 0) == doctest::Approx(b.at(5, 4, 0)));
        double total = 0.0;
        for (int y = 0; y < 9; ++y)
            for (int x = 0; x < 9; ++x) total += b.at(y, x, 0);
        CHECK(total == doctest::Approx(1.0));
    }
    SUBCASE("noise is seeded and clamped") {
        const FrameSequence n1 = degrade(seq, {DegradationKind::Noise, 15, 1});
        const FrameSequence n2 = degrade(seq, {DegradationKind::Noise, 15, 1});
        const FrameSequence n3 = degrade(seq, {DegradationKind::Noise, 15, 2});
        CHECK(n1.frames == n2.frames);
        CHECK(n1.frames != n3.frames);
        CHECK_NOTHROW(n1.validate());
        double var = 0.0;
        long count = 0;
        for (int i = 0; i < seq.size(); ++i) {
            for (std::size_t k = 0; k < seq.frames[i].data.size(); ++k) {
                const double v = seq.frames[i].data[k];
                if (v < 0.2 || v > 0.8) continue;  // away from clamping
                const double d = n1.frames[i].data[k] - v;
                var += d * d;
                ++count;
            }
        }
        CHECK(std::sqrt(var / count) == doctest::Approx(15.0 / 255.0).epsilon(0.05));
    }
    SUBCASE("all outputs stay in range") {
        for (auto kind : {DegradationKind::Jpeg, DegradationKind::Blur, DegradationKind::Noise})
            for (double d : {20.0, 11.0, 25.0}) {
                if (kind == DegradationKind::Blur && d != 11.0) continue;
                CHECK_NOTHROW(degrade(seq, {kind, d, 3}).validate());
            }
    }
    SUBCASE("illegal degrees are rejected") {
        CHECK_THROWS_AS(degrade(seq, {DegradationKind::Blur, 4}), Error);
        CHECK_THROWS_AS(degrade(seq, {DegradationKind::Jpeg, 101}), Error);
        CHECK_THROWS_AS(degrade(seq, {DegradationKind::Noise, -1}), Error);
        CHECK_THROWS_AS(degrade(seq, {DegradationKind::Sampling, 0}), Error);
        CHECK_THROWS_AS(degrade(seq, {DegradationKind::Sampling, 2.5}), Error);
    }
}

TEST_CASE("manifest round trip and split disjointness") {
    const fs::path dir = oracle::scratch_dir("manifest");
    DatasetManifest m;
    m.fps = 30.0;
    m.entries = {{"b", "videos/b", "videos/b.lm", Label::Fake, Split::Val},
                 {"a", "videos/a", "videos/a.lm", Label::Real, Split::Train}};
    m.save(dir / "manifest.json");
    CHECK_THROWS_AS(DatasetManifest::load(dir / "manifest.json"), Error);
    fs::create_directories(dir / "videos/a");
    fs::create_directories(dir / "videos/b");
    std::ofstream(dir / "videos/a.lm") << "";
    std::ofstream(dir / "videos/b.lm") << "";
    const DatasetManifest back = DatasetManifest::load(dir / "manifest.json");
    REQUIRE(back.entries.size() == 2);
    CHECK(back.split(Split::Train).front()->id == "a");
    CHECK(back.resolve(back.entries[0].video) == dir / "videos/b");

    m.entries.push_back({"a", "x", "y", Label::Real, Split::Test});
    CHECK_THROWS_AS(m.validate(), Error);
}

}  // TEST_SUITE
