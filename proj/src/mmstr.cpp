#include "deeprhythm/mmstr.hpp"
#include "deeprhythm/geometry.hpp"

#include "binio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <sstream>

namespace deeprhythm {
namespace {

constexpr std::uint32_t kMmstVersion = 1;
constexpr std::uint32_t kCropsVersion = 1;

double median_of(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return (lo + hi) / 2.0;
}

BoundingBox contour_bounds(const Landmarks& p) {
    using namespace landmark_index;
    BoundingBox box{p[kJawBegin].x, p[kJawBegin].y, p[kJawBegin].x, p[kJawBegin].y};
    auto extend = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            box.x0 = std::min(box.x0, p[i].x);
            box.y0 = std::min(box.y0, p[i].y);
            box.x1 = std::max(box.x1, p[i].x);
            box.y1 = std::max(box.y1, p[i].y);
        }
    };
    extend(kJawBegin, kJawEnd);
    extend(kForeheadBegin, kForeheadEnd);
    return box;
}

Landmarks median_landmarks(const LandmarkTrack& track) {
    std::vector<const Landmarks*> valid;
    for (const auto& p : track.points) {
        if (p) valid.push_back(&*p);
    }
    if (valid.empty()) throw data_error("landmark track has no valid frame");
    Landmarks out{};
    std::vector<double> xs(valid.size()), ys(valid.size());
    for (int k = 0; k < kLandmarkCount; ++k) {
        for (std::size_t i = 0; i < valid.size(); ++i) {
            xs[i] = (*valid[i])[k].x;
            ys[i] = (*valid[i])[k].y;
        }
        out[k] = {median_of(xs), median_of(ys)};
    }
    return out;
}

// Row/column index of pixel centres along one axis; -1 outside the box.
std::vector<int> axis_cells(int pixels, double lo, double hi, int cells) {
    std::vector<int> out(static_cast<std::size_t>(pixels), -1);
    const double step = (hi - lo) / cells;
    for (int i = 0; i < pixels; ++i) {
        const double c = i + 0.5;
        if (c < lo || c >= hi) continue;
        out[i] = std::min(cells - 1, static_cast<int>(std::floor((c - lo) / step)));
    }
    return out;
}

std::string meta_path(const std::filesystem::path& path) { return path.string() + ".meta"; }

}  // namespace

void GridSpec::validate() const {
    if (rows < 1 || cols < 1) throw usage_error("grid rows and cols must be >= 1");
}

int RoiGrid::block_at(Point2 p) const noexcept {
    if (p.x < face_box.x0 || p.x >= face_box.x1 || p.y < face_box.y0 || p.y >= face_box.y1) return -1;
    const int c = std::min(cols - 1, static_cast<int>(std::floor((p.x - face_box.x0) / block_width())));
    const int r = std::min(rows - 1, static_cast<int>(std::floor((p.y - face_box.y0) / block_height())));
    return r * cols + c;
}

BoundingBox median_face_box(const LandmarkTrack& track) {
    std::vector<double> x0, y0, x1, y1;
    for (const auto& p : track.points) {
        if (!p) continue;
        const BoundingBox b = contour_bounds(*p);
        x0.push_back(b.x0);
        y0.push_back(b.y0);
        x1.push_back(b.x1);
        y1.push_back(b.y1);
    }
    if (x0.empty()) throw data_error("landmark track has no valid frame");
    const BoundingBox box{median_of(x0), median_of(y0), median_of(x1), median_of(y1)};
    if (!(box.width() > 0.0 && box.height() > 0.0)) throw data_error("degenerate face box");
    return box;
}

RoiGrid make_roi_grid(const LandmarkTrack& track, const GridSpec& spec) {
    spec.validate();
    return RoiGrid{spec.rows, spec.cols, median_face_box(track)};
}

FaceMask face_mask(int height, int width, const Landmarks& points) {
    const geometry::Polygon contour = geometry::face_contour(points);
    if (contour.size() < 3 || std::abs(geometry::signed_area(contour)) < 1e-9) {
        throw data_error("degenerate face contour (collinear landmarks)");
    }
    const geometry::Polygon right = geometry::right_eye(points);
    const geometry::Polygon left = geometry::left_eye(points);

    FaceMask mask;
    mask.height = height;
    mask.width = width;
    mask.valid.assign(static_cast<std::size_t>(height) * width, 0);

    double x0 = contour[0].x, x1 = x0, y0 = contour[0].y, y1 = y0;
    for (const Point2& p : contour) {
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    const int ylo = std::max(0, static_cast<int>(std::floor(y0))), yhi = std::min(height - 1, static_cast<int>(std::ceil(y1)));
    const int xlo = std::max(0, static_cast<int>(std::floor(x0))), xhi = std::min(width - 1, static_cast<int>(std::ceil(x1)));
    for (int y = ylo; y <= yhi; ++y) {
        for (int x = xlo; x <= xhi; ++x) {
            const Point2 c{x + 0.5, y + 0.5};
            if (!geometry::contains(contour, c)) continue;
            if (geometry::contains(right, c) || geometry::contains(left, c)) continue;
            mask.valid[static_cast<std::size_t>(y) * width + x] = 1;
            ++mask.valid_count;
        }
    }
    return mask;
}

MaskedFrame mask_face(const Image& frame, const Landmarks& points) {
    MaskedFrame out{frame, face_mask(frame.height, frame.width, points)};
    for (int y = 0; y < frame.height; ++y) {
        for (int x = 0; x < frame.width; ++x) {
            if (out.mask.at(y, x)) continue;
            for (int c = 0; c < frame.channels; ++c) out.frame.at(y, x, c) = 0.0;
        }
    }
    return out;
}

PriorBlocks prior_block_set(const Landmarks& points, const RoiGrid& grid) {
    using namespace landmark_index;
    const int N = grid.size();
    if (N < kPriorBlockCount) {
        throw usage_error("cannot place 6 prior blocks on a " + std::to_string(grid.rows) + "x" +
                          std::to_string(grid.cols) + " grid");
    }
    const double bh = grid.block_height();
    const BoundingBox& box = grid.face_box;
    auto cell = [&](Point2 p) {
        const int c = std::clamp(static_cast<int>(std::floor((p.x - box.x0) / grid.block_width())), 0, grid.cols - 1);
        const int r = std::clamp(static_cast<int>(std::floor((p.y - box.y0) / bh)), 0, grid.rows - 1);
        return r * grid.cols + c;
    };

    const int shifted[] = {kRightEyeOuter, kRightEyeInner, kLeftEyeInner, kLeftEyeOuter};
    std::vector<int> seeds;
    for (int k : shifted) seeds.push_back(cell({points[k].x, points[k].y + bh}));
    seeds.push_back(cell(points[kNoseBridgeTop]));
    seeds.push_back(cell(points[kNoseBridgeUpper]));

    std::vector<bool> used(static_cast<std::size_t>(N), false);
    PriorBlocks out{};
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        int chosen = -1;
        std::vector<bool> seen(static_cast<std::size_t>(N), false);
        std::deque<int> queue{seeds[i]};
        seen[seeds[i]] = true;
        while (!queue.empty()) {
            const int b = queue.front();
            queue.pop_front();
            if (!used[b]) {
                chosen = b;
                break;
            }
            const int r = b / grid.cols, c = b % grid.cols;
            const int dr[] = {0, 1, 0, -1}, dc[] = {1, 0, -1, 0};  // right, down, left, up
            for (int d = 0; d < 4; ++d) {
                const int nr = r + dr[d], nc = c + dc[d];
                if (nr < 0 || nr >= grid.rows || nc < 0 || nc >= grid.cols) continue;
                const int nb = nr * grid.cols + nc;
                if (!seen[nb]) {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        if (chosen < 0) throw usage_error("cannot place 6 prior blocks");
        used[chosen] = true;
        out[i] = chosen;
    }
    std::sort(out.begin(), out.end());
    return out;
}

PriorBlocks prior_block_set(const LandmarkTrack& track, const GridSpec& spec) {
    const RoiGrid grid = make_roi_grid(track, spec);
    return prior_block_set(median_landmarks(track), grid);
}

std::vector<float> prior_attention(const PriorBlocks& blocks, int n) {
    std::vector<float> s(static_cast<std::size_t>(n), 0.0f);
    for (int b : blocks) {
        if (b < 0 || b >= n) throw usage_error("prior blocks unavailable for this grid");
        s[b] = 1.0f;
    }
    return s;
}

std::vector<float> MmstMap::block_major() const {
    std::vector<float> out(values.size());
    for (int t = 0; t < T; ++t) {
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) out[(static_cast<std::size_t>(n) * T + t) * C + c] = at(t, n, c);
        }
    }
    return out;
}

MmstMap MmstMap::head(int frames) const {
    if (frames < 1 || frames > T) throw usage_error("head: frame count out of range");
    MmstMap out = *this;
    out.T = frames;
    out.values.resize(static_cast<std::size_t>(frames) * N * C);
    return out;
}

void MmstMap::validate() const {
    if (T <= 0 || N <= 0 || C <= 0) throw data_error("MMST map has an empty dimension");
    if (values.size() != static_cast<std::size_t>(T) * N * C) throw data_error("MMST map size mismatch");
    for (float v : values) {
        if (!(v >= 0.0f && v <= 1.0f)) throw data_error("MMST map entry outside [0,1] or NaN");
    }
}

MmstMap compute_mmst_map(const FrameSequence& seq, const LandmarkTrack& track, const GridSpec& spec) {
    const int T = seq.size();
    if (T == 0) throw data_error("empty frame sequence");
    if (track.size() != T) throw data_error("landmark track length does not match frame count");
    for (int i = 0; i < T; ++i) {
        if (!track.valid(i)) throw data_error("frame " + std::to_string(i) + " has no landmarks");
    }
    const int H = seq.height(), W = seq.width(), C = 3;

    MmstMap map;
    map.T = T;
    map.N = spec.size();
    map.C = C;
    map.fps = seq.fps;
    map.source_id = seq.source_id;
    map.grid = make_roi_grid(track, spec);
    map.prior.fill(-1);  // grids with fewer than six blocks carry no prior
    if (map.N >= kPriorBlockCount) map.prior = prior_block_set(median_landmarks(track), map.grid);
    map.values.assign(static_cast<std::size_t>(T) * map.N * C, 0.0f);

    const BoundingBox& box = map.grid.face_box;
    const std::vector<int> col_of = axis_cells(W, box.x0, box.x1, spec.cols);
    const std::vector<int> row_of = axis_cells(H, box.y0, box.y1, spec.rows);

    std::vector<double> sums(static_cast<std::size_t>(map.N) * C);
    std::vector<long> counts(static_cast<std::size_t>(map.N));
    for (int i = 0; i < T; ++i) {
        const Image& frame = seq.frames[i];
        const FaceMask mask = face_mask(H, W, *track.points[i]);
        if (mask.valid_count == 0) throw data_error("frame " + std::to_string(i) + " has no valid face pixels");
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0L);
        double face_sum[3] = {0.0, 0.0, 0.0};
        for (int y = 0; y < H; ++y) {
            const int r = row_of[y];
            for (int x = 0; x < W; ++x) {
                if (!mask.at(y, x)) continue;
                const double* px = &frame.data[frame.index(y, x, 0)];
                for (int c = 0; c < C; ++c) face_sum[c] += px[c];
                const int col = col_of[x];
                if (r < 0 || col < 0) continue;
                const int b = r * spec.cols + col;
                for (int c = 0; c < C; ++c) sums[static_cast<std::size_t>(b) * C + c] += px[c];
                ++counts[b];
            }
        }
        for (int b = 0; b < map.N; ++b) {
            for (int c = 0; c < C; ++c) {
                const double mean = counts[b] > 0 ? sums[static_cast<std::size_t>(b) * C + c] / counts[b]
                                                  : face_sum[c] / mask.valid_count;
                map.at(i, b, c) = static_cast<float>(mean);
            }
            if (counts[b] == 0) ++map.fallback_blocks;
        }
    }
    return map;
}

void save_mmst_map(const std::filesystem::path& path, const MmstMap& map) {
    map.validate();
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw data_error("cannot write " + path.string());
        out.write("MMST", 4);
        binio::put_u32(out, kMmstVersion);
        binio::put_u32(out, static_cast<std::uint32_t>(map.T));
        binio::put_u32(out, static_cast<std::uint32_t>(map.N));
        binio::put_u32(out, static_cast<std::uint32_t>(map.C));
        binio::put_f32(out, static_cast<float>(map.fps));
        binio::put_f32_array(out, map.values.data(), map.values.size());
        if (!out) throw data_error("write failed for " + path.string());
    }
    std::ofstream meta(meta_path(path));
    if (!meta) throw data_error("cannot write " + meta_path(path));
    char buf[160];
    meta << "source_id " << map.source_id << "\n";
    meta << "grid_rows " << map.grid.rows << "\n";
    meta << "grid_cols " << map.grid.cols << "\n";
    const BoundingBox& b = map.grid.face_box;
    std::snprintf(buf, sizeof buf, "face_box %.17g %.17g %.17g %.17g\n", b.x0, b.y0, b.x1, b.y1);
    meta << buf;
    meta << "prior_blocks";
    for (int p : map.prior) meta << ' ' << p;
    meta << "\nfallback_blocks " << map.fallback_blocks << "\n";
}

MmstMap load_mmst_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open MMST map " + path.string());
    const std::string what = "MMST map " + path.string();
    binio::expect_magic(in, "MMST", what);
    const std::uint32_t version = binio::get_u32(in, what);
    if (version != kMmstVersion) throw data_error(what + ": unsupported version " + std::to_string(version));
    MmstMap map;
    map.T = static_cast<int>(binio::get_u32(in, what));
    map.N = static_cast<int>(binio::get_u32(in, what));
    map.C = static_cast<int>(binio::get_u32(in, what));
    map.fps = binio::get_f32(in, what);
    const std::size_t n = static_cast<std::size_t>(map.T) * map.N * map.C;
    if (map.T <= 0 || map.N <= 0 || map.C <= 0 || n > (1u << 28)) throw data_error(what + ": bad header");
    map.values.resize(n);
    binio::get_f32_array(in, map.values.data(), n, what);

    std::ifstream meta(meta_path(path));
    if (!meta) throw data_error("missing metadata sidecar " + meta_path(path));
    std::string line;
    while (std::getline(meta, line)) {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "source_id") {
            std::getline(ss >> std::ws, map.source_id);
        } else if (key == "grid_rows") {
            ss >> map.grid.rows;
        } else if (key == "grid_cols") {
            ss >> map.grid.cols;
        } else if (key == "face_box") {
            ss >> map.grid.face_box.x0 >> map.grid.face_box.y0 >> map.grid.face_box.x1 >> map.grid.face_box.y1;
        } else if (key == "prior_blocks") {
            for (int& p : map.prior) ss >> p;
        } else if (key == "fallback_blocks") {
            ss >> map.fallback_blocks;
        }
        if (ss.fail()) throw data_error("malformed metadata line '" + line + "'");
    }
    if (map.grid.size() != map.N) throw data_error(what + ": grid does not match N");
    map.validate();
    return map;
}

double relative_distance(const MmstMap& a, const MmstMap& b) {
    if (a.N != b.N || a.C != b.C) throw usage_error("MMST maps differ in N or C");
    const std::size_t n = static_cast<std::size_t>(std::min(a.T, b.T)) * a.N * a.C;
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.values[i]) - b.values[i];
        diff += d * d;
        ref += static_cast<double>(b.values[i]) * b.values[i];
    }
    if (ref == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(diff / ref);
}

void FaceCrops::frame(int t, std::span<float> out) const {
    const std::size_t stride = frame_stride();
    if (out.size() != stride) throw usage_error("face crop buffer size mismatch");
    const std::uint8_t* src = data.data() + stride * static_cast<std::size_t>(t);
    for (std::size_t i = 0; i < stride; ++i) out[i] = src[i] / 255.0f;
}

FaceCrops face_crops(const FrameSequence& seq, const BoundingBox& box, int size) {
    if (size < 1) throw usage_error("crop size must be positive");
    const int H = seq.height(), W = seq.width();
    FaceCrops crops;
    crops.T = seq.size();
    crops.size = size;
    crops.data.resize(crops.frame_stride() * crops.T);

    struct Tap {
        int i0, i1;
        double w;
    };
    auto taps = [size](double lo, double extent, int limit) {
        std::vector<Tap> out(static_cast<std::size_t>(size));
        for (int u = 0; u < size; ++u) {
            const double pos = std::clamp(lo + (u + 0.5) * extent / size - 0.5, 0.0, limit - 1.0);
            const int i0 = std::min(static_cast<int>(pos), limit - 1);
            out[u] = {i0, std::min(i0 + 1, limit - 1), pos - i0};
        }
        return out;
    };
    const auto tx = taps(box.x0, box.width(), W);
    const auto ty = taps(box.y0, box.height(), H);
    for (int t = 0; t < crops.T; ++t) {
        const Image& f = seq.frames[t];
        std::uint8_t* dst = crops.data.data() + crops.frame_stride() * t;
        for (int c = 0; c < 3; ++c) {
            for (int v = 0; v < size; ++v) {
                const Tap& a = ty[v];
                for (int u = 0; u < size; ++u) {
                    const Tap& b = tx[u];
                    const double top = (1 - b.w) * f.at(a.i0, b.i0, c) + b.w * f.at(a.i0, b.i1, c);
                    const double bot = (1 - b.w) * f.at(a.i1, b.i0, c) + b.w * f.at(a.i1, b.i1, c);
                    const double val = (1 - a.w) * top + a.w * bot;
                    dst[(static_cast<std::size_t>(c) * size + v) * size + u] =
                        static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
                }
            }
        }
    }
    return crops;
}

void save_face_crops(const std::filesystem::path& path, const FaceCrops& crops) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write " + path.string());
    out.write("MESO", 4);
    binio::put_u32(out, kCropsVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(crops.T));
    binio::put_u32(out, static_cast<std::uint32_t>(crops.size));
    out.write(reinterpret_cast<const char*>(crops.data.data()), static_cast<std::streamsize>(crops.data.size()));
    if (!out) throw data_error("write failed for " + path.string());
}

FaceCrops load_face_crops(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open face crops " + path.string());
    const std::string what = "face crops " + path.string();
    binio::expect_magic(in, "MESO", what);
    if (binio::get_u32(in, what) != kCropsVersion) throw data_error(what + ": unsupported version");
    FaceCrops crops;
    crops.T = static_cast<int>(binio::get_u32(in, what));
    crops.size = static_cast<int>(binio::get_u32(in, what));
    if (crops.T <= 0 || crops.size <= 0 || crops.size > 1024) throw data_error(what + ": bad header");
    crops.data.resize(crops.frame_stride() * crops.T);
    if (!in.read(reinterpret_cast<char*>(crops.data.data()), static_cast<std::streamsize>(crops.data.size()))) {
        throw data_error("truncated " + what);
    }
    return crops;
}

}  // namespace deeprhythm
