#include "deeprhythm/media_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace deeprhythm {

namespace fs = std::filesystem;

void FrameSequence::validate() const {
    if (frames.empty()) {
        throw data_error("frame sequence " + source_id + " is empty");
    }
    if (!(fps > 0.0)) {
        throw data_error("frame sequence " + source_id + " has non-positive fps");
    }
    const Image& first = frames.front();
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const Image& f = frames[i];
        if (!f.same_size(first)) {
            throw data_error("frame sequence " + source_id + ": inconsistent dimensions at frame " +
                             std::to_string(i));
        }
        for (double v : f.data) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw data_error("frame sequence " + source_id + ": intensity out of [0,1] at frame " +
                                 std::to_string(i));
            }
        }
    }
}

BoundingBox landmark_bounds(const Landmarks& points) {
    BoundingBox box{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
                    std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest()};
    for (const Point2& p : points) {
        box.x0 = std::min(box.x0, p.x);
        box.y0 = std::min(box.y0, p.y);
        box.x1 = std::max(box.x1, p.x);
        box.y1 = std::max(box.y1, p.y);
    }
    return box;
}

std::vector<bool> LandmarkTrack::valid_flags() const {
    std::vector<bool> flags(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) flags[i] = points[i].has_value();
    return flags;
}

int LandmarkTrack::invalid_count() const {
    return static_cast<int>(std::count_if(points.begin(), points.end(),
                                          [](const auto& p) { return !p.has_value(); }));
}

// ---------------------------------------------------------------------------

FrameSequence load_frame_sequence(const fs::path& dir, double fps) {
    if (!fs::is_directory(dir)) {
        throw data_error("missing frame directory " + dir.string());
    }
    if (!(fps > 0.0)) {
        throw usage_error("fps must be positive");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        if (ext == ".ppm" || ext == ".pnm" || ext == ".png") files.push_back(entry.path());
    }
    if (files.empty()) {
        throw data_error("no frames found in " + dir.string());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

    FrameSequence seq;
    seq.fps = fps;
    seq.source_id = dir.filename().string();
    seq.frames.reserve(files.size());
    for (const fs::path& file : files) {
        Image frame = read_image(file);
        if (!seq.frames.empty() && !frame.same_size(seq.frames.front())) {
            throw data_error("inconsistent dimensions: " + file.string() + " is " +
                             std::to_string(frame.width) + "x" + std::to_string(frame.height) +
                             ", expected " + std::to_string(seq.frames.front().width) + "x" +
                             std::to_string(seq.frames.front().height));
        }
        seq.frames.push_back(std::move(frame));
    }
    return seq;
}

void save_frame_sequence(const fs::path& dir, const FrameSequence& seq) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw data_error("cannot create " + dir.string() + ": " + ec.message());
    }
    char name[32];
    for (int i = 0; i < seq.size(); ++i) {
        std::snprintf(name, sizeof(name), "%06d.ppm", i);
        write_ppm(dir / name, seq.frames[i], 16);
    }
}

LandmarkCandidates load_landmark_candidates(const fs::path& path, int expected_frames,
                                            int frame_height, int frame_width) {
    std::ifstream in(path);
    if (!in) {
        throw data_error("missing landmark sidecar " + path.string());
    }
    LandmarkCandidates candidates(static_cast<std::size_t>(std::max(expected_frames, 0)));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream fields(line);
        long frame = -1;
        if (!(fields >> frame)) continue;  // blank line
        const std::string where = path.string() + ":" + std::to_string(line_no);
        std::vector<double> coords;
        double v = 0.0;
        while (fields >> v) coords.push_back(v);
        if (!fields.eof()) {
            throw data_error("malformed landmark record at " + where);
        }
        if (coords.size() != 2 * kLandmarkCount) {
            throw data_error("expected 81 landmarks at " + where + ", got " +
                             std::to_string(coords.size() / 2) +
                             (coords.size() % 2 ? " and a dangling coordinate" : ""));
        }
        if (frame < 0 || frame >= expected_frames) {
            throw data_error("frame index " + std::to_string(frame) + " out of range at " + where);
        }
        Landmarks points{};
        for (int k = 0; k < kLandmarkCount; ++k) {
            const double x = coords[2 * k];
            const double y = coords[2 * k + 1];
            if (!(x >= 0.0 && x <= frame_width && y >= 0.0 && y <= frame_height)) {
                throw data_error("landmark " + std::to_string(k) + " out of frame bounds at " + where);
            }
            points[k] = {x, y};
        }
        candidates[static_cast<std::size_t>(frame)].push_back(points);
    }
    return candidates;
}

LandmarkTrack load_landmark_track(const fs::path& path, int expected_frames, int frame_height,
                                  int frame_width) {
    return select_face(load_landmark_candidates(path, expected_frames, frame_height, frame_width));
}

void save_landmark_track(const fs::path& path, const LandmarkTrack& track) {
    std::ofstream out(path);
    if (!out) {
        throw data_error("cannot write " + path.string());
    }
    out << "# frame x0 y0 ... x80 y80\n";
    char buf[64];
    for (int i = 0; i < track.size(); ++i) {
        if (!track.points[i]) continue;
        out << i;
        for (const Point2& p : *track.points[i]) {
            std::snprintf(buf, sizeof(buf), " %.17g %.17g", p.x, p.y);
            out << buf;
        }
        out << '\n';
    }
    if (!out) {
        throw data_error("cannot write " + path.string());
    }
}

LandmarkTrack select_face(const LandmarkCandidates& candidates, std::optional<Point2> prev_center) {
    LandmarkTrack track;
    track.points.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& options = candidates[i];
        if (options.empty()) continue;
        std::size_t best = 0;
        if (options.size() > 1) {
            double best_score = std::numeric_limits<double>::max();
            for (std::size_t k = 0; k < options.size(); ++k) {
                const BoundingBox box = landmark_bounds(options[k]);
                double score = 0.0;
                if (prev_center) {
                    const Point2 c = box.center();
                    score = std::hypot(c.x - prev_center->x, c.y - prev_center->y);
                } else {
                    score = -box.area();
                }
                if (score < best_score) {
                    best_score = score;
                    best = k;
                }
            }
        }
        track.points[i] = options[best];
        prev_center = landmark_bounds(options[best]).center();
    }
    return track;
}

PreprocessedVideo preprocess_video(const FrameSequence& seq, const LandmarkTrack& track) {
    if (seq.size() != track.size()) {
        throw data_error("frame/landmark length mismatch for " + seq.source_id + ": " +
                         std::to_string(seq.size()) + " vs " + std::to_string(track.size()));
    }
    const int window = std::min(seq.size(), kMaxClipFrames);
    PreprocessedVideo out;
    out.seq.fps = seq.fps;
    out.seq.source_id = seq.source_id;
    for (int i = 0; i < window; ++i) {
        if (!track.points[i]) {
            ++out.dropped;
            continue;
        }
        out.seq.frames.push_back(seq.frames[i]);
        out.track.points.push_back(track.points[i]);
    }
    if (out.dropped > kMaxDroppedFrames) {
        throw VideoRejected(out.dropped);
    }
    if (out.seq.frames.empty()) {
        throw data_error("video " + seq.source_id + " has no frames with landmarks");
    }
    return out;
}

// ---------------------------------------------------------------------------

const char* to_string(Label label) {
    return label == Label::Real ? "real" : "fake";
}

const char* to_string(Disruption d) {
    switch (d) {
        case Disruption::None: return "none";
        case Disruption::Flatten: return "flatten";
        case Disruption::PhaseScramble: return "phase_scramble";
        case Disruption::BlockTexture: return "block_texture";
    }
    return "none";
}

Label parse_label(const std::string& text) {
    if (text == "real" || text == "0") return Label::Real;
    if (text == "fake" || text == "1") return Label::Fake;
    throw data_error("unknown label '" + text + "'");
}

Disruption parse_disruption(const std::string& text) {
    if (text == "none") return Disruption::None;
    if (text == "flatten") return Disruption::Flatten;
    if (text == "phase_scramble") return Disruption::PhaseScramble;
    if (text == "block_texture") return Disruption::BlockTexture;
    throw usage_error("unknown disruption '" + text + "'");
}

const char* to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::Train;
    if (text == "val") return Split::Val;
    if (text == "test") return Split::Test;
    throw data_error("unknown split '" + text + "'");
}

// ---------------------------------------------------------------------------

DatasetManifest DatasetManifest::load(const fs::path& path, bool check_paths) {
    std::ifstream in(path);
    if (!in) {
        throw data_error("missing manifest " + path.string());
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest manifest;
    manifest.base_dir = path.parent_path();
    try {
        manifest.fps = doc.value("fps", 30.0);
        for (const auto& item : doc.at("entries")) {
            ManifestEntry entry;
            entry.video = item.at("video").get<std::string>();
            entry.landmarks = item.at("landmarks").get<std::string>();
            entry.label = parse_label(item.at("label").get<std::string>());
            entry.split = parse_split(item.at("split").get<std::string>());
            entry.id = item.contains("id") ? item.at("id").get<std::string>()
                                           : entry.video.filename().string();
            manifest.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error("malformed manifest " + path.string() + ": " + e.what());
    }
    manifest.validate();
    if (check_paths) {
        for (const ManifestEntry& e : manifest.entries) {
            for (const fs::path& p : {manifest.resolve(e.video), manifest.resolve(e.landmarks)}) {
                if (!fs::exists(p)) throw data_error("manifest entry '" + e.id + "': cannot resolve " + p.string());
            }
        }
    }
    return manifest;
}

void DatasetManifest::save(const fs::path& path) const {
    nlohmann::json doc;
    doc["fps"] = fps;
    doc["entries"] = nlohmann::json::array();
    for (const ManifestEntry& e : entries) {
        doc["entries"].push_back({{"id", e.id},
                                  {"video", e.video.generic_string()},
                                  {"landmarks", e.landmarks.generic_string()},
                                  {"label", to_string(e.label)},
                                  {"split", to_string(e.split)}});
    }
    std::ofstream out(path);
    if (!out) {
        throw data_error("cannot write " + path.string());
    }
    out << doc.dump(2) << '\n';
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split which) const {
    std::vector<const ManifestEntry*> out;
    for (const ManifestEntry& e : entries) {
        if (e.split == which) out.push_back(&e);
    }
    std::sort(out.begin(), out.end(),
              [](const ManifestEntry* a, const ManifestEntry* b) { return a->id < b->id; });
    return out;
}

fs::path DatasetManifest::resolve(const fs::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
}

void DatasetManifest::validate() const {
    if (!(fps > 0.0)) {
        throw data_error("manifest fps must be positive");
    }
    std::map<std::string, Split> seen;
    for (const ManifestEntry& e : entries) {
        auto [it, inserted] = seen.emplace(e.id, e.split);
        if (!inserted) {
            if (it->second != e.split) {
                throw data_error("source '" + e.id + "' appears in both " + to_string(it->second) +
                                 " and " + to_string(e.split));
            }
            throw data_error("duplicate manifest entry '" + e.id + "'");
        }
    }
}

}  // namespace deeprhythm
