#include <doctest.h>

#include "deeprhythm/geometry.hpp"
#include "deeprhythm/mmstr.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

using namespace deeprhythm;

namespace {

// Jaw and forehead points spread over the perimeter of an axis-aligned
// square; every other landmark collapses onto the centre (no eye area).
Landmarks square_face(double x0, double y0, double side) {
    Landmarks lm{};
    const Point2 c{x0 + side / 2, y0 + side / 2};
    lm.fill(c);
    std::vector<Point2> perimeter;
    for (int k = 0; k < 30; ++k) {
        const double s = side * (k % 8) / 8.0;
        switch (k / 8) {
            case 0: perimeter.push_back({x0 + s, y0}); break;
            case 1: perimeter.push_back({x0 + side, y0 + s}); break;
            case 2: perimeter.push_back({x0 + side - s, y0 + side}); break;
            default: perimeter.push_back({x0, y0 + side - s}); break;
        }
    }
    for (int k = 0; k < 17; ++k) lm[k] = perimeter[k];
    for (int k = 0; k < 13; ++k) lm[68 + k] = perimeter[17 + k];
    return lm;
}

LandmarkTrack repeat(const Landmarks& lm, int T) {
    LandmarkTrack t;
    t.points.assign(static_cast<std::size_t>(T), lm);
    return t;
}

FrameSequence repeat(const Image& f, int T) {
    FrameSequence s;
    s.fps = 30.0;
    s.frames.assign(static_cast<std::size_t>(T), f);
    return s;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2.0;
}

}  // namespace

TEST_SUITE("mmstr") {

TEST_CASE("square face without eyes") {
    const Landmarks lm = square_face(4, 4, 8);
    const MaskedFrame m = mask_face(Image(16, 16, 3, 1.0), lm);
    CHECK(m.mask.valid_count == 64);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            const bool inside = x >= 4 && x < 12 && y >= 4 && y < 12;
            CHECK(m.mask.at(y, x) == inside);
            CHECK(m.frame.at(y, x, 1) == (inside ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("eye centroids are masked and the valid area matches a brute-force scan") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        const double a = 12 + 10 * u(rng), b = 15 + 10 * u(rng);
        const Landmarks lm = synthetic_landmarks(32 + 4 * u(rng), 32 + 4 * u(rng), a, b);
        const MaskedFrame m = mask_face(Image(64, 64, 3, 0.5), lm);
        for (const auto& eye : {geometry::right_eye(lm), geometry::left_eye(lm)}) {
            const Point2 c = geometry::centroid(eye);
            CHECK_FALSE(m.mask.at(static_cast<int>(c.y), static_cast<int>(c.x)));
        }
        const auto hull = oracle::face_hull(lm);
        int count = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool v = oracle::pixel_valid(lm, hull, y, x);
                count += v;
                CHECK(m.mask.at(y, x) == v);
            }
        CHECK(m.mask.valid_count == count);
    }
}

TEST_CASE("collinear landmarks are rejected") {
    Landmarks lm{};
    for (int k = 0; k < kLandmarkCount; ++k) lm[k] = {1.0 + 0.1 * k, 2.0 + 0.1 * k};
    CHECK_THROWS_AS(mask_face(Image(16, 16, 3, 0.5), lm), Error);
}

TEST_CASE("pooling examples") {
    SUBCASE("uniform video") {
        const Landmarks lm = synthetic_landmarks(32, 32, 18, 22);
        const MmstMap map = compute_mmst_map(repeat(Image(64, 64, 3, 0.4), 5), repeat(lm, 5), GridSpec{});
        CHECK(map.T == 5);
        CHECK(map.N == 25);
        CHECK(map.C == 3);
        for (float v : map.values) CHECK(v == doctest::Approx(0.4f).epsilon(1e-7));
    }
    SUBCASE("four-pixel block mean, permutation and scaling") {
        const Landmarks lm = square_face(0, 0, 4);
        Image f(6, 6, 3, 0.1);
        const double vals[4] = {0.2, 0.4, 0.6, 0.8};
        for (int k = 0; k < 4; ++k)
            for (int c = 0; c < 3; ++c) f.at(k / 2, k % 2, c) = vals[k];
        const MmstMap map = compute_mmst_map(repeat(f, 2), repeat(lm, 2), GridSpec{2, 2});
        CHECK(map.at(0, 0, 0) == doctest::Approx(0.5f));
        CHECK(map.at(1, 0, 2) == doctest::Approx(0.5f));
        CHECK(map.at(0, 3, 1) == doctest::Approx(0.1f));

        Image g = f;
        std::swap(g.at(0, 0, 1), g.at(1, 1, 1));
        std::swap(g.at(0, 1, 1), g.at(1, 0, 1));
        const MmstMap permuted = compute_mmst_map(repeat(g, 2), repeat(lm, 2), GridSpec{2, 2});
        CHECK(permuted.values == map.values);

        Image h = f;
        for (double& v : h.data) v *= 0.5;
        const MmstMap halved = compute_mmst_map(repeat(h, 2), repeat(lm, 2), GridSpec{2, 2});
        for (std::size_t i = 0; i < map.values.size(); ++i) CHECK(halved.values[i] == map.values[i] * 0.5f);
    }
    SUBCASE("masked pixels are excluded") {
        Landmarks lm = square_face(0, 0, 8);
        // Right eye covers the left half of block 0 (x in [0,2], y in [0,4]).
        const Point2 eye[6] = {{0, 0}, {1, 0}, {2, 0}, {2, 4}, {1, 4}, {0, 4}};
        for (int k = 0; k < 6; ++k) lm[36 + k] = eye[k];
        Image f(8, 8, 3, 0.9);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 2; ++x)
                for (int c = 0; c < 3; ++c) f.at(y, x, c) = 0.05 * (x + y);
        const MmstMap map = compute_mmst_map(repeat(f, 1), repeat(lm, 1), GridSpec{2, 2});
        CHECK(map.at(0, 0, 0) == doctest::Approx(0.9f));
        CHECK(map.fallback_blocks == 0);
    }
    SUBCASE("empty blocks fall back to the face-wide mean") {
        // Triangle face leaves the top-right block without valid pixels.
        Landmarks lm{};
        lm.fill({1, 7});
        for (int k = 0; k < 17; ++k) lm[k] = {k / 16.0 * 8.0, 8.0};
        for (int k = 0; k < 13; ++k) lm[68 + k] = {0.0, 8.0 - k / 12.0 * 8.0};
        std::mt19937_64 rng(4);
        const Image f = oracle::random_image(8, 8, rng);
        const MmstMap map = compute_mmst_map(repeat(f, 1), repeat(lm, 1), GridSpec{4, 4});
        const auto ref = oracle::pooled_means(f, lm, map.grid.face_box, 4, 4);
        for (int n = 0; n < 16; ++n)
            for (int c = 0; c < 3; ++c) CHECK(map.at(0, n, c) == doctest::Approx(ref[n * 3 + c]).epsilon(1e-6));
        CHECK(map.fallback_blocks > 0);
    }
}

TEST_CASE("pooling matches a brute-force oracle on random 16x16 videos") {
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const int T = 3 + trial % 4;
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
            const auto hull = oracle::face_hull(lm);
            double bx0 = 1e9, by0 = 1e9, bx1 = -1e9, by1 = -1e9;
            for (const Point2& p : hull) {
                bx0 = std::min(bx0, p.x);
                by0 = std::min(by0, p.y);
                bx1 = std::max(bx1, p.x);
                by1 = std::max(by1, p.y);
            }
            x0.push_back(bx0);
            y0.push_back(by0);
            x1.push_back(bx1);
            y1.push_back(by1);
        }
        const GridSpec spec{2 + trial % 3, 2 + trial % 4};
        const MmstMap map = compute_mmst_map(seq, track, spec);
        const BoundingBox box{median(x0), median(y0), median(x1), median(y1)};
        CHECK(map.grid.face_box.x0 == doctest::Approx(box.x0));
        CHECK(map.grid.face_box.y1 == doctest::Approx(box.y1));
        for (int t = 0; t < T; ++t) {
            const auto ref = oracle::pooled_means(seq.frames[t], *track.points[t], box, spec.rows, spec.cols);
            for (int n = 0; n < spec.size(); ++n)
                for (int c = 0; c < 3; ++c) CHECK(std::abs(map.at(t, n, c) - ref[n * 3 + c]) <= 1e-6);
        }
        CHECK_NOTHROW(map.validate());
    }
}

TEST_CASE("compute_mmst_map requires landmarks on every frame") {
    LandmarkTrack t = repeat(synthetic_landmarks(32, 32, 18, 22), 3);
    t.points[1].reset();
    CHECK_THROWS_AS(compute_mmst_map(repeat(Image(64, 64, 3, 0.4), 3), t, GridSpec{}), Error);
}

TEST_CASE("prior blocks on a centred synthetic face") {
    const double W = 128, H = 128;
    const double cx = W / 2, cy = H / 2, a = 0.30 * W, b = 0.38 * H;
    const Landmarks lm = synthetic_landmarks(cx, cy, a, b);
    const LandmarkTrack track = repeat(lm, 3);
    const PriorBlocks prior = prior_block_set(track, GridSpec{5, 5});

    // Geometric oracle: rasterise each construction point into the block rectangles.
    const double x0 = cx - a, y0 = cy - b, bw = 2 * a / 5, bh = 2 * b / 5;
    auto block_of = [&](Point2 p) {
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 5; ++c)
                if (p.x >= x0 + c * bw && p.x < x0 + (c + 1) * bw && p.y >= y0 + r * bh && p.y < y0 + (r + 1) * bh)
                    return r * 5 + c;
        return -1;
    };
    std::set<int> expected;
    for (int k : {36, 39, 42, 45}) expected.insert(block_of({lm[k].x, lm[k].y + bh}));
    for (int k : {27, 28}) expected.insert(block_of(lm[k]));
    REQUIRE(expected.size() == 6);
    CHECK(std::set<int>(prior.begin(), prior.end()) == expected);
    CHECK(expected == std::set<int>{7, 10, 11, 12, 13, 14});

    const auto sp = prior_attention(prior, 25);
    CHECK(std::count(sp.begin(), sp.end(), 1.0f) == 6);
    CHECK(std::count(sp.begin(), sp.end(), 0.0f) == 19);
}

TEST_CASE("prior blocks stay distinct on coarse grids") {
    const Landmarks lm = synthetic_landmarks(64, 64, 38, 48);
    const LandmarkTrack track = repeat(lm, 1);
    for (auto [r, c] : {std::pair{3, 2}, {2, 3}, {3, 3}, {1, 6}, {6, 1}, {4, 4}, {7, 7}}) {
        const PriorBlocks p = prior_block_set(track, GridSpec{r, c});
        CHECK(std::set<int>(p.begin(), p.end()).size() == 6);
        for (int b : p) CHECK((b >= 0 && b < r * c));
    }
    try {
        prior_block_set(track, GridSpec{1, 1});
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("cannot place 6 prior blocks") != std::string::npos);
    }
}

TEST_CASE("map serialization and helpers") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    MmstMap map;
    map.T = 7;
    map.N = 25;
    map.fps = 30.0;
    map.values.resize(7 * 25 * 3);
    for (float& v : map.values) v = u(rng);
    map.grid = RoiGrid{5, 5, {1.25, 2.5, 100.125, 120.0}};
    map.prior = {7, 10, 11, 12, 13, 14};
    map.fallback_blocks = 3;
    map.source_id = "clip 01";

    const auto dir = oracle::scratch_dir("mmst_io");
    save_mmst_map(dir / "x.mmst", map);
    const MmstMap back = load_mmst_map(dir / "x.mmst");
    CHECK(back.values == map.values);
    CHECK(back.T == 7);
    CHECK(back.prior == map.prior);
    CHECK(back.fallback_blocks == 3);
    CHECK(back.source_id == "clip 01");
    CHECK(back.grid.face_box.x1 == 100.125);

    const auto bm = map.block_major();
    CHECK(bm[(3 * 7 + 2) * 3 + 1] == map.at(2, 3, 1));
    CHECK(map.head(4).values.size() == 4 * 25 * 3);
    CHECK(relative_distance(map, map) == 0.0);
    CHECK(relative_distance(map.head(3), map) == 0.0);

    std::ofstream(dir / "bad.mmst") << "NOPE";
    CHECK_THROWS_AS(load_mmst_map(dir / "bad.mmst"), Error);
}

TEST_CASE("face crops resample the box") {
    FrameSequence seq = repeat(Image(32, 32, 3, 0.25), 2);
    seq.frames[1].at(16, 16, 0) = 1.0;
    const FaceCrops crops = face_crops(seq, {8, 8, 24, 24}, 16);
    CHECK(crops.T == 2);
    std::vector<float> buf(crops.frame_stride());
    crops.frame(0, buf);
    for (float v : buf) CHECK(v == doctest::Approx(64.0f / 255.0f));
    const auto dir = oracle::scratch_dir("crops_io");
    save_face_crops(dir / "c.meso", crops);
    CHECK(load_face_crops(dir / "c.meso").data == crops.data);
}

}  // TEST_SUITE
