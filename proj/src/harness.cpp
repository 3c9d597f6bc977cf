#include "deeprhythm/harness.hpp"
#include "deeprhythm/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace deeprhythm::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// seed streams
enum : std::uint64_t {
    kStreamVideo = 1,
    kStreamPulse = 2,
    kStreamSplit = 3,
    kStreamInit = 10,
    kStreamShuffle = 11,
    kStreamMesoInit = 12,
    kStreamMesoShuffle = 13,
    kStreamDegrade = 20,
};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw data_error("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write " + path.string());
    out << text;
    if (!out) throw data_error("write failed: " + path.string());
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("missing " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw data_error("malformed " + path.string() + ": " + e.what());
    }
}

std::string timestamp_now() {
    std::time_t t;
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
        t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
    } else {
        t = std::time(nullptr);
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void say(const Logger& log, const std::string& line) {
    if (log) log(line);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

// --- config <-> json -------------------------------------------------------

template <class T>
void take(const json& j, const char* key, T& dst, std::set<std::string>& seen) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw usage_error(std::string("config key '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (!seen.count(k)) throw usage_error("unknown config key '" + where + k + "'");
    }
}

void apply_json(Config& c, const json& j) {
    if (!j.is_object()) throw usage_error("config must be a JSON object");
    std::set<std::string> seen{"preset"};
    take(j, "seed", c.seed, seen);
    take(j, "grid_rows", c.grid.rows, seen);
    take(j, "grid_cols", c.grid.cols, seen);
    take(j, "alpha", c.magnify.alpha, seen);
    take(j, "band_lo_hz", c.magnify.f_lo, seen);
    take(j, "band_hi_hz", c.magnify.f_hi, seen);
    take(j, "pyramid_levels", c.magnify.levels, seen);
    take(j, "chrom_atten", c.magnify.chrom_atten, seen);
    take(j, "lstm_hidden", c.net.lstm_hidden, seen);
    take(j, "meso_input", c.net.meso_input, seen);
    take(j, "classifier_width", c.net.classifier_width, seen);
    take(j, "sa_kernel", c.net.sa_kernel, seen);
    take(j, "sa_channels", c.net.sa_channels, seen);
    take(j, "block_major", c.net.block_major, seen);
    take(j, "lr", c.train.lr, seen);
    take(j, "weight_decay", c.train.weight_decay, seen);
    take(j, "max_epochs", c.train.max_epochs, seen);
    take(j, "patience", c.train.patience, seen);
    take(j, "batch_size", c.train.batch_size, seen);
    seen.insert("ablation");
    if (j.contains("ablation")) {
        if (!j["ablation"].is_string()) throw usage_error("config key 'ablation' must be a string");
        c.ablation = nn::Ablation::parse(j["ablation"].get<std::string>());
    }
    seen.insert("meso");
    if (j.contains("meso")) {
        const json& m = j["meso"];
        if (!m.is_object()) throw usage_error("config key 'meso' must be an object");
        std::set<std::string> s;
        take(m, "lr", c.meso.lr, s);
        take(m, "weight_decay", c.meso.weight_decay, s);
        take(m, "epochs", c.meso.epochs, s);
        take(m, "patience", c.meso.patience, s);
        take(m, "batch_size", c.meso.batch_size, s);
        take(m, "frames_per_video", c.meso.frames_per_video, s);
        reject_unknown(m, s, "meso.");
    }
    seen.insert("synth");
    if (j.contains("synth")) {
        const json& m = j["synth"];
        if (!m.is_object()) throw usage_error("config key 'synth' must be an object");
        std::set<std::string> s;
        take(m, "n_real", c.synth.n_real, s);
        take(m, "n_fake", c.synth.n_fake, s);
        take(m, "frames", c.synth.frames, s);
        take(m, "height", c.synth.height, s);
        take(m, "width", c.synth.width, s);
        take(m, "fps", c.synth.fps, s);
        take(m, "pulse_lo_hz", c.synth.pulse_lo_hz, s);
        take(m, "pulse_hi_hz", c.synth.pulse_hi_hz, s);
        take(m, "pulse_amp_lo", c.synth.pulse_amp_lo, s);
        take(m, "pulse_amp_hi", c.synth.pulse_amp_hi, s);
        s.insert("disruptions");
        if (m.contains("disruptions")) {
            c.synth.disruptions.clear();
            try {
                for (const auto& d : m["disruptions"]) c.synth.disruptions.push_back(parse_disruption(d.get<std::string>()));
            } catch (const json::exception& e) {
                throw usage_error(std::string("config key 'synth.disruptions': ") + e.what());
            }
        }
        reject_unknown(m, s, "synth.");
    }
    seen.insert("sweep");
    if (j.contains("sweep")) {
        const json& m = j["sweep"];
        if (!m.is_object()) throw usage_error("config key 'sweep' must be an object");
        c.sweep.clear();
        for (const auto& [k, v] : m.items()) {
            const DegradationKind kind = parse_degradation_kind(k);
            try {
                c.sweep[kind] = v.get<std::vector<double>>();
            } catch (const json::exception& e) {
                throw usage_error("config key 'sweep." + k + "': " + e.what());
            }
        }
    }
    reject_unknown(j, seen, "");
}

json config_json(const Config& c) {
    json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["grid_rows"] = c.grid.rows;
    j["grid_cols"] = c.grid.cols;
    j["alpha"] = c.magnify.alpha;
    j["band_lo_hz"] = c.magnify.f_lo;
    j["band_hi_hz"] = c.magnify.f_hi;
    j["pyramid_levels"] = c.magnify.levels;
    j["chrom_atten"] = c.magnify.chrom_atten;
    j["lstm_hidden"] = c.net.lstm_hidden;
    j["meso_input"] = c.net.meso_input;
    j["classifier_width"] = c.net.classifier_width;
    j["sa_kernel"] = c.net.sa_kernel;
    j["sa_channels"] = c.net.sa_channels;
    j["block_major"] = c.net.block_major;
    j["lr"] = c.train.lr;
    j["weight_decay"] = c.train.weight_decay;
    j["max_epochs"] = c.train.max_epochs;
    j["patience"] = c.train.patience;
    j["batch_size"] = c.train.batch_size;
    j["ablation"] = c.ablation.str();
    j["meso"] = {{"lr", c.meso.lr},
                 {"weight_decay", c.meso.weight_decay},
                 {"epochs", c.meso.epochs},
                 {"patience", c.meso.patience},
                 {"batch_size", c.meso.batch_size},
                 {"frames_per_video", c.meso.frames_per_video}};
    json dis = json::array();
    for (Disruption d : c.synth.disruptions) dis.push_back(to_string(d));
    j["synth"] = {{"n_real", c.synth.n_real},       {"n_fake", c.synth.n_fake},
                  {"frames", c.synth.frames},       {"height", c.synth.height},
                  {"width", c.synth.width},         {"fps", c.synth.fps},
                  {"pulse_lo_hz", c.synth.pulse_lo_hz}, {"pulse_hi_hz", c.synth.pulse_hi_hz},
                  {"pulse_amp_lo", c.synth.pulse_amp_lo}, {"pulse_amp_hi", c.synth.pulse_amp_hi},
                  {"disruptions", dis}};
    json sw = json::object();
    for (const auto& [k, v] : c.sweep) sw[to_string(k)] = v;
    j["sweep"] = sw;
    return j;
}

json net_json(const nn::NetConfig& n) {
    return {{"blocks", n.blocks},           {"channels", n.channels},
            {"frames", n.frames},           {"lstm_hidden", n.lstm_hidden},
            {"meso_input", n.meso_input},   {"classifier_width", n.classifier_width},
            {"sa_kernel", n.sa_kernel},     {"sa_channels", n.sa_channels},
            {"block_major", n.block_major}};
}

nn::NetConfig net_from_json(const json& j) {
    nn::NetConfig n;
    try {
        n.blocks = j.at("blocks").get<int>();
        n.channels = j.at("channels").get<int>();
        n.frames = j.at("frames").get<int>();
        n.lstm_hidden = j.at("lstm_hidden").get<int>();
        n.meso_input = j.at("meso_input").get<int>();
        n.classifier_width = j.at("classifier_width").get<int>();
        n.sa_kernel = j.at("sa_kernel").get<int>();
        n.sa_channels = j.at("sa_channels").get<int>();
        n.block_major = j.at("block_major").get<bool>();
    } catch (const json::exception& e) {
        throw data_error(std::string("malformed network description: ") + e.what());
    }
    n.validate();
    return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return splitmix(splitmix(splitmix(seed) ^ stream) ^ index);
}

Config Config::preset_defaults(const std::string& name) {
    Config c;
    c.preset = name;
    c.sweep = {{DegradationKind::Jpeg, {100, 80, 60, 40, 20}},
               {DegradationKind::Blur, {1, 5, 11, 15, 19}},
               {DegradationKind::Noise, {0, 5, 15, 25}},
               {DegradationKind::Sampling, {1, 2, 5, 10, 15}}};
    c.train.lr = 1e-3;
    c.train.weight_decay = 0.0;
    c.train.max_epochs = 60;
    c.train.patience = 20;
    c.train.batch_size = 8;
    c.meso.epochs = 15;
    c.meso.patience = 5;
    c.meso.batch_size = 32;
    c.meso.frames_per_video = 8;
    if (name == "desk") return c;
    if (name == "paper") {
        c.train.lr = 0.1;
        c.train.weight_decay = 0.01;
        c.train.max_epochs = 500;
        c.train.patience = 50;
        c.synth.frames = 300;
        c.net.classifier_width = 64;
        c.net.meso_input = 256;
        return c;
    }
    throw usage_error("unknown preset '" + name + "' (expected desk or paper)");
}

Config Config::from_json_text(const std::string& text, const std::optional<std::string>& preset_override) {
    json j;
    try {
        j = text.empty() ? json::object() : json::parse(text);
    } catch (const json::exception& e) {
        throw usage_error(std::string("malformed config: ") + e.what());
    }
    if (!j.is_object()) throw usage_error("config must be a JSON object");
    std::string preset = "desk";
    if (j.contains("preset")) {
        if (!j["preset"].is_string()) throw usage_error("config key 'preset' must be a string");
        preset = j["preset"].get<std::string>();
    }
    if (preset_override) preset = *preset_override;
    Config c = preset_defaults(preset);
    apply_json(c, j);
    c.validate();
    return c;
}

Config Config::load(const fs::path& path, const std::optional<std::string>& preset_override) {
    std::ifstream in(path);
    if (!in) throw usage_error("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str(), preset_override);
}

std::string Config::to_json() const { return config_json(*this).dump(); }

std::uint64_t Config::hash() const { return fnv1a(to_json()); }

void Config::validate() const {
    grid.validate();
    if (!(magnify.alpha >= 0.0)) throw usage_error("alpha must be non-negative");
    if (magnify.levels < 1) throw usage_error("pyramid_levels must be at least 1");
    if (!(magnify.chrom_atten >= 0.0 && magnify.chrom_atten <= 1.0)) throw usage_error("chrom_atten must lie in [0,1]");
    if (!(magnify.f_lo > 0.0 && magnify.f_lo < magnify.f_hi)) throw usage_error("need 0 < band_lo_hz < band_hi_hz");
    nn::NetConfig n = net;
    n.validate();
    if (!(train.lr >= 0.0) || !(train.weight_decay >= 0.0)) throw usage_error("lr and weight_decay must be non-negative");
    if (train.max_epochs < 1 || train.patience < 1 || train.batch_size < 1) {
        throw usage_error("max_epochs, patience and batch_size must be positive");
    }
    if (meso.epochs < 1 || meso.patience < 1 || meso.batch_size < 1 || meso.frames_per_video < 1) {
        throw usage_error("meso epochs, patience, batch_size and frames_per_video must be positive");
    }
    if (synth.n_real < 0 || synth.n_fake < 0) throw usage_error("synth counts must be non-negative");
    if (synth.n_fake > 0 && synth.disruptions.empty()) throw usage_error("synth.disruptions is empty");
    if (!(synth.pulse_lo_hz > 0.0 && synth.pulse_lo_hz <= synth.pulse_hi_hz)) {
        throw usage_error("need 0 < synth.pulse_lo_hz <= synth.pulse_hi_hz");
    }
    if (!(synth.pulse_amp_lo >= 0.0 && synth.pulse_amp_lo <= synth.pulse_amp_hi)) {
        throw usage_error("need 0 <= synth.pulse_amp_lo <= synth.pulse_amp_hi");
    }
    for (const auto& [kind, degrees] : sweep)
        for (double d : degrees) DegradationSpec{kind, d, 0}.validate();
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void ExperimentReport::write_json(const fs::path& path) const {
    json j;
    j["command"] = command;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["timestamp"] = timestamp;
    j["rows"] = json::array();
    for (const ReportRow& r : rows) {
        json row = {{"condition", r.condition}, {"accuracy", r.accuracy}, {"n_videos", r.n_videos}};
        row["degree"] = r.degree ? json(*r.degree) : json(nullptr);
        row["mmst_rel_distance"] = r.distance ? json(*r.distance) : json(nullptr);
        j["rows"].push_back(row);
    }
    j["absent"] = json::array();
    for (const auto& [c, why] : absent) j["absent"].push_back({{"condition", c}, {"reason", why}});
    write_text(path, j.dump(2) + "\n");
}

ExperimentReport ExperimentReport::read_json(const fs::path& path) {
    const json j = read_json_file(path);
    ExperimentReport r;
    try {
        r.command = j.at("command").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.timestamp = j.value("timestamp", "");
        for (const auto& row : j.at("rows")) {
            ReportRow x;
            x.condition = row.at("condition").get<std::string>();
            x.accuracy = row.at("accuracy").get<double>();
            x.n_videos = row.at("n_videos").get<int>();
            if (row.contains("degree") && !row["degree"].is_null()) x.degree = row["degree"].get<double>();
            if (row.contains("mmst_rel_distance") && !row["mmst_rel_distance"].is_null()) {
                x.distance = row["mmst_rel_distance"].get<double>();
            }
            r.rows.push_back(x);
        }
        for (const auto& a : j.value("absent", json::array())) {
            r.absent.emplace_back(a.at("condition").get<std::string>(), a.at("reason").get<std::string>());
        }
    } catch (const json::exception& e) {
        throw data_error("malformed report " + path.string() + ": " + e.what());
    }
    return r;
}

std::string ExperimentReport::markdown() const {
    std::ostringstream md;
    bool with_degree = false, with_distance = false;
    for (const auto& r : rows) {
        with_degree |= r.degree.has_value();
        with_distance |= r.distance.has_value();
    }
    md << "## " << command << "\n\n";
    md << "config `" << config_hash << "`, seed " << seed << ", " << timestamp << "\n\n";
    md << "| condition |" << (with_degree ? " degree |" : "") << " accuracy | videos |"
       << (with_distance ? " MMST rel. distance |" : "") << "\n";
    md << "|---|" << (with_degree ? "---:|" : "") << "---:|---:|" << (with_distance ? "---:|" : "") << "\n";
    char buf[64];
    for (const auto& r : rows) {
        md << "| " << r.condition << " |";
        if (with_degree) {
            if (r.degree) {
                std::snprintf(buf, sizeof(buf), " %g |", *r.degree);
                md << buf;
            } else {
                md << " - |";
            }
        }
        std::snprintf(buf, sizeof(buf), " %.4f | %d |", r.accuracy, r.n_videos);
        md << buf;
        if (with_distance) {
            if (r.distance) {
                std::snprintf(buf, sizeof(buf), " %.6f |", *r.distance);
                md << buf;
            } else {
                md << " |";
            }
        }
        md << "\n";
    }
    if (!absent.empty()) {
        md << "\nAbsent:\n\n";
        for (const auto& [c, why] : absent) md << "- " << c << ": " << why << "\n";
    }
    return md.str();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

SplitCounts split_counts(int n_class) {
    SplitCounts s;
    if (n_class <= 0) return s;
    const int held = std::max(1, n_class / 10);
    if (n_class < 2 * held + 1) throw usage_error("need at least 3 videos per class for an 8:1:1 split");
    s.val = held;
    s.test = held;
    s.train = n_class - 2 * held;
    return s;
}

SynthResult cmd_synth(const Config& cfg, const fs::path& out, const Logger& log) {
    cfg.validate();
    const SplitCounts real = split_counts(cfg.synth.n_real), fake = split_counts(cfg.synth.n_fake);
    ensure_dir(out / "videos");

    std::mt19937_64 pulse_rng(derive_seed(cfg.seed, kStreamPulse));
    std::uniform_real_distribution<double> pulse(cfg.synth.pulse_lo_hz, cfg.synth.pulse_hi_hz);
    std::uniform_real_distribution<double> amp(cfg.synth.pulse_amp_lo, cfg.synth.pulse_amp_hi);

    DatasetManifest manifest;
    manifest.fps = cfg.synth.fps;
    manifest.base_dir = out;
    json meta = json::array();
    int index = 0;
    for (Label label : {Label::Real, Label::Fake}) {
        const int n = label == Label::Real ? cfg.synth.n_real : cfg.synth.n_fake;
        const SplitCounts counts = label == Label::Real ? real : fake;
        std::vector<Split> splits;
        splits.insert(splits.end(), counts.train, Split::Train);
        splits.insert(splits.end(), counts.val, Split::Val);
        splits.insert(splits.end(), counts.test, Split::Test);
        std::mt19937_64 split_rng(derive_seed(cfg.seed, kStreamSplit, static_cast<std::uint64_t>(label)));
        std::shuffle(splits.begin(), splits.end(), split_rng);
        for (int k = 0; k < n; ++k, ++index) {
            char id[32];
            std::snprintf(id, sizeof(id), "%s_%04d", to_string(label), k);
            SynthSpec spec;
            spec.height = cfg.synth.height;
            spec.width = cfg.synth.width;
            spec.frames = cfg.synth.frames;
            spec.fps = cfg.synth.fps;
            spec.pulse_freq = pulse(pulse_rng);
            spec.pulse_amp = amp(pulse_rng);
            spec.label = label;
            spec.disruption = label == Label::Fake ? cfg.synth.disruptions[k % cfg.synth.disruptions.size()]
                                                   : Disruption::None;
            spec.seed = derive_seed(cfg.seed, kStreamVideo, static_cast<std::uint64_t>(index));
            SyntheticVideo v = synth_video(spec);
            v.seq.source_id = id;
            save_frame_sequence(out / "videos" / id, v.seq);
            save_landmark_track(out / "videos" / (std::string(id) + ".landmarks"), v.track);

            ManifestEntry e;
            e.id = id;
            e.video = fs::path("videos") / id;
            e.landmarks = fs::path("videos") / (std::string(id) + ".landmarks");
            e.label = label;
            e.split = splits[k];
            manifest.entries.push_back(e);
            meta.push_back({{"id", id},
                            {"label", to_string(label)},
                            {"disruption", to_string(spec.disruption)},
                            {"pulse_freq", spec.pulse_freq},
                            {"pulse_amp", spec.pulse_amp},
                            {"seed", spec.seed},
                            {"split", to_string(splits[k])}});
            say(log, std::string("synth ") + id + " (" + to_string(spec.disruption) + ")");
        }
    }
    manifest.save(out / "manifest.json");
    write_text(out / "synth.json",
               json{{"config_hash", hex64(cfg.hash())}, {"seed", cfg.seed}, {"videos", meta}}.dump(2) + "\n");
    return {out / "manifest.json", real.train + fake.train, real.val + fake.val, real.test + fake.test};
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

Extracted extract_video(const FrameSequence& seq, const LandmarkTrack& track, const Config& cfg) {
    const PreprocessedVideo pre = preprocess_video(seq, track);
    FrameSequence masked;
    masked.fps = pre.seq.fps;
    masked.source_id = pre.seq.source_id;
    masked.frames.reserve(pre.seq.frames.size());
    for (int i = 0; i < pre.seq.size(); ++i) masked.frames.push_back(mask_face(pre.seq.frames[i], *pre.track.points[i]).frame);

    Extracted out;
    out.raw = compute_mmst_map(masked, pre.track, cfg.grid);
    MagnifyParams p = cfg.magnify;
    p.f_hi = std::min(p.f_hi, std::nextafter(masked.fps / 2.0, 0.0));
    if (p.f_lo < p.f_hi && masked.size() >= 2) {
        out.magnified = compute_mmst_map(magnify_video(masked, p), pre.track, cfg.grid);
    } else {
        out.magnified = out.raw;
    }
    out.raw.source_id = out.magnified.source_id = seq.source_id;
    out.crops = face_crops(pre.seq, median_face_box(pre.track), cfg.net.meso_input);
    return out;
}

ExtractResult cmd_extract(const Config& cfg, const fs::path& manifest_path, const fs::path& out, const Logger& log) {
    cfg.validate();
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    ensure_dir(out / "maps");
    ensure_dir(out / "crops");

    std::vector<const ManifestEntry*> entries;
    for (const auto& e : manifest.entries) entries.push_back(&e);
    std::sort(entries.begin(), entries.end(), [](auto* a, auto* b) { return a->id < b->id; });

    ExtractResult result;
    json videos = json::array();
    for (const ManifestEntry* e : entries) {
        try {
            FrameSequence seq = load_frame_sequence(manifest.resolve(e->video), manifest.fps);
            seq.source_id = e->id;
            const LandmarkTrack track =
                load_landmark_track(manifest.resolve(e->landmarks), seq.size(), seq.height(), seq.width());
            const Extracted x = extract_video(seq, track, cfg);
            save_mmst_map(out / "maps" / (e->id + ".mmst"), x.magnified);
            save_mmst_map(out / "maps" / (e->id + ".raw.mmst"), x.raw);
            save_face_crops(out / "crops" / (e->id + ".crops"), x.crops);
            videos.push_back({{"id", e->id},
                              {"label", to_string(e->label)},
                              {"split", to_string(e->split)},
                              {"T", x.magnified.T},
                              {"N", x.magnified.N},
                              {"fallback_blocks", x.magnified.fallback_blocks},
                              {"map", "maps/" + e->id + ".mmst"},
                              {"raw", "maps/" + e->id + ".raw.mmst"},
                              {"crops", "crops/" + e->id + ".crops"}});
            ++result.extracted;
            say(log, "extract " + e->id + " T=" + std::to_string(x.magnified.T));
        } catch (const Error& err) {
            if (err.kind() == ErrorKind::Usage) throw;
            result.rejected.emplace_back(e->id, one_line(err.what()));
            say(log, "reject " + e->id + ": " + err.what());
        }
    }
    json rejected = json::array();
    std::string csv = "id,reason\n";
    for (const auto& [id, why] : result.rejected) {
        rejected.push_back({{"id", id}, {"reason", why}});
        csv += csv_field(id) + "," + csv_field(why) + "\n";
    }
    write_text(out / "rejections.csv", csv);
    write_text(out / "extract.json", json{{"config_hash", hex64(cfg.hash())},
                                          {"fps", manifest.fps},
                                          {"meso_input", cfg.net.meso_input},
                                          {"videos", videos},
                                          {"rejected", rejected}}
                                         .dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// degrade
// ---------------------------------------------------------------------------

DegradeResult cmd_degrade(const Config& cfg, const fs::path& manifest_path, DegradationKind kind, double degree,
                          const fs::path& out, bool all_splits, const Logger& log) {
    cfg.validate();
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    ensure_dir(out / "videos");
    DatasetManifest degraded;
    degraded.base_dir = out;
    degraded.fps = manifest.fps;
    for (const ManifestEntry& e : manifest.entries) {
        if (!all_splits && e.split != Split::Test) continue;
        const DegradationSpec spec{kind, degree, derive_seed(cfg.seed, kStreamDegrade, fnv1a(e.id))};
        FrameSequence seq = load_frame_sequence(manifest.resolve(e.video), manifest.fps);
        const LandmarkTrack track = load_landmark_track(manifest.resolve(e.landmarks), seq.size(), seq.height(), seq.width());
        const FrameSequence d = degrade(seq, spec);
        degraded.fps = d.fps;
        save_frame_sequence(out / "videos" / e.id, d);
        save_landmark_track(out / "videos" / (e.id + ".landmarks"), degrade_track(track, spec));
        ManifestEntry n = e;
        n.video = fs::path("videos") / e.id;
        n.landmarks = fs::path("videos") / (e.id + ".landmarks");
        degraded.entries.push_back(n);
        say(log, "degrade " + e.id + " " + to_string(kind) + " " + num(degree));
    }
    degraded.save(out / "manifest.json");
    return {out / "manifest.json", static_cast<int>(degraded.entries.size())};
}

// ---------------------------------------------------------------------------
// datasets and models
// ---------------------------------------------------------------------------

Dataset load_dataset(const fs::path& data_dir, bool magnified, bool with_crops, int max_frames) {
    const json index = read_json_file(data_dir / "extract.json");
    struct Item {
        std::string id, file, crops;
        Label label;
        Split split;
    };
    std::vector<Item> items;
    try {
        for (const auto& v : index.at("videos")) {
            items.push_back({v.at("id").get<std::string>(), v.at(magnified ? "map" : "raw").get<std::string>(),
                             v.at("crops").get<std::string>(), parse_label(v.at("label").get<std::string>()),
                             parse_split(v.at("split").get<std::string>())});
        }
    } catch (const json::exception& e) {
        throw data_error("malformed " + (data_dir / "extract.json").string() + ": " + e.what());
    }
    if (items.empty()) throw data_error("no extracted videos in " + data_dir.string());

    std::vector<MmstMap> maps;
    for (const Item& it : items) maps.push_back(load_mmst_map(data_dir / it.file));
    Dataset d;
    d.frames = std::numeric_limits<int>::max();
    d.blocks = maps.front().N;
    for (const MmstMap& m : maps) {
        d.frames = std::min(d.frames, m.T);
        if (m.N != d.blocks) throw data_error("extracted maps disagree on the block count");
    }
    if (max_frames > 0) d.frames = std::min(d.frames, max_frames);
    for (std::size_t k = 0; k < items.size(); ++k) {
        VideoSample s = make_sample(maps[k], items[k].label, d.frames);
        s.id = items[k].id;
        auto& bucket = items[k].split == Split::Train ? d.train : items[k].split == Split::Val ? d.val : d.test;
        bucket.push_back(std::move(s));
        if (with_crops) {
            auto& cb = items[k].split == Split::Train ? d.train_crops
                       : items[k].split == Split::Val ? d.val_crops
                                                      : d.test_crops;
            cb.push_back(load_face_crops(data_dir / items[k].crops));
        }
    }
    return d;
}

namespace {

std::uint64_t variant_key(const nn::Ablation& a) { return fnv1a(a.str()); }

nn::NetConfig net_for(const Config& cfg, const Dataset& d) {
    nn::NetConfig n = cfg.net;
    n.blocks = d.blocks;
    n.frames = d.frames;
    n.channels = 3;
    return n;
}

std::string log_csv(const std::vector<EpochRecord>& log) {
    std::string s = "epoch,train_loss,val_loss,val_acc\n";
    for (const auto& r : log) s += std::to_string(r.epoch) + "," + num(r.train_loss) + "," + num(r.val_loss) + "," + num(r.val_acc) + "\n";
    return s;
}

void fill_frame_scores(nn::DualStAttenNet<float>& net, std::vector<VideoSample>& samples,
                       const std::vector<FaceCrops>& crops) {
    for (std::size_t k = 0; k < samples.size(); ++k) {
        std::vector<float> tf = score_frames(net, crops.at(k));
        if (static_cast<int>(tf.size()) < samples[k].T) throw data_error("fewer crops than map rows for " + samples[k].id);
        tf.resize(static_cast<std::size_t>(samples[k].T));
        samples[k].t_f = std::move(tf);
    }
}

void save_model(const fs::path& dir, nn::DualStAttenNet<float>& net, const ModelInfo& info) {
    ensure_dir(dir);
    nn::write_checkpoint(dir / "model.drck", nn::export_params(net.store()));
    write_text(dir / "model.json", json{{"net", net_json(info.net)},
                                        {"ablation", info.ablation.str()},
                                        {"variant", info.ablation.name()},
                                        {"config_hash", info.config_hash},
                                        {"seed", info.seed},
                                        {"best_epoch", info.best_epoch}}
                                       .dump(2) + "\n");
}

// Stage one on the train/val crops; returns the frame-scorer log.
TrainResult train_frame_scorer(const Config& cfg, Dataset& d,
                               nn::DualStAttenNet<float>& scorer, const Logger& log) {
    std::vector<FrameSource> tr, va;
    for (std::size_t k = 0; k < d.train.size(); ++k) tr.push_back({&d.train_crops[k], d.train[k].label});
    for (std::size_t k = 0; k < d.val.size(); ++k) va.push_back({&d.val_crops[k], d.val[k].label});
    MesoOptions mo = cfg.meso;
    mo.seed = derive_seed(cfg.seed, kStreamMesoShuffle);
    TrainResult r = train_meso(scorer, tr, va, mo, [&](const EpochRecord& e) {
        say(log, "meso epoch " + std::to_string(e.epoch) + " loss " + num(e.train_loss) + " val " + num(e.val_loss) +
                     " acc " + num(e.val_acc));
    });
    fill_frame_scores(scorer, d.train, d.train_crops);
    fill_frame_scores(scorer, d.val, d.val_crops);
    fill_frame_scores(scorer, d.test, d.test_crops);
    return r;
}

TrainResult train_stage2(const Config& cfg, nn::DualStAttenNet<float>& net, const Dataset& d, bool attention_only,
                         const Logger& log) {
    TrainOptions o = cfg.train;
    o.attention_only = attention_only;
    o.seed = derive_seed(cfg.seed, kStreamShuffle, variant_key(net.ablation()));
    const std::string name = net.ablation().name();
    return train_dual(net, d.train, d.val, o, [&](const EpochRecord& e) {
        say(log, name + " epoch " + std::to_string(e.epoch) + " loss " + num(e.train_loss) + " val " + num(e.val_loss) +
                     " acc " + num(e.val_acc));
    });
}

std::unique_ptr<nn::DualStAttenNet<float>> make_net(const Config& cfg, const nn::NetConfig& n, const nn::Ablation& a) {
    return std::make_unique<nn::DualStAttenNet<float>>(n, a, derive_seed(cfg.seed, kStreamInit, variant_key(a)));
}

bool staged(const nn::Ablation& a) { return a.any_attention() && !a.e2e; }

nn::Ablation base_of(const nn::Ablation& a) {
    nn::Ablation b;
    b.mm = a.mm;
    return b;
}

}  // namespace

Model::Model(const fs::path& dir) {
    const json j = read_json_file(dir / "model.json");
    try {
        info_.net = net_from_json(j.at("net"));
        info_.ablation = nn::Ablation::parse(j.at("ablation").get<std::string>());
        info_.config_hash = j.value("config_hash", "");
        info_.seed = j.value("seed", std::uint64_t{0});
        info_.best_epoch = j.value("best_epoch", 0);
    } catch (const json::exception& e) {
        throw data_error("malformed " + (dir / "model.json").string() + ": " + e.what());
    }
    net_ = std::make_unique<nn::DualStAttenNet<float>>(info_.net, info_.ablation, 0);
    nn::import_params(net_->store(), nn::read_checkpoint(dir / "model.drck"));
}

VideoSample Model::prepare(const Extracted& e, Label label) const {
    const MmstMap& map = info_.ablation.mm ? e.magnified : e.raw;
    if (map.N != info_.net.blocks) {
        throw data_error("map of " + map.source_id + " has " + std::to_string(map.N) + " blocks, model expects " +
                         std::to_string(info_.net.blocks));
    }
    VideoSample s = make_sample(map, label, info_.net.frames);
    if (info_.ablation.F) {
        std::vector<float> tf = score_frames(*net_, e.crops);
        tf.resize(static_cast<std::size_t>(s.T));
        s.t_f = std::move(tf);
    }
    return s;
}

double Model::predict(const Extracted& e) { return deeprhythm::predict(*net_, prepare(e, Label::Real)); }

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

TrainRun cmd_train(const Config& cfg, const fs::path& data_dir, const fs::path& out, const Logger& log) {
    cfg.validate();
    const nn::Ablation a = cfg.ablation;
    Dataset d = load_dataset(data_dir, a.mm, a.F);
    const nn::NetConfig ncfg = net_for(cfg, d);
    ensure_dir(out);
    TrainRun run;

    auto net = make_net(cfg, ncfg, a);
    if (a.F) {
        nn::DualStAttenNet<float> scorer(ncfg, nn::Ablation::parse("mm,F"), derive_seed(cfg.seed, kStreamMesoInit));
        run.stage1 = train_frame_scorer(cfg, d, scorer, log);
        net->store().copy_from(scorer.store(), {"meso."});
        write_text(out / "meso_log.csv", log_csv(run.stage1->log));
    }
    if (staged(a)) {
        auto base = make_net(cfg, ncfg, base_of(a));
        run.base = train_stage2(cfg, *base, d, false, log);
        net->store().copy_from(base->store(), {"phi."});
        write_text(out / "base_log.csv", log_csv(run.base->log));
    }
    run.stage2 = train_stage2(cfg, *net, d, staged(a), log);
    write_text(out / "train_log.csv", log_csv(run.stage2.log));
    run.val = evaluate(*net, d.val);
    run.info = {ncfg, a, hex64(cfg.hash()), cfg.seed, run.stage2.best_epoch};
    save_model(out, *net, run.info);
    return run;
}

namespace {

void write_metrics(const fs::path& out, const Metrics& m, const std::string& split, const std::string& hash) {
    std::string csv = "id,truth,p_fake,label\n";
    for (const auto& p : m.predictions) {
        csv += csv_field(p.id) + "," + to_string(p.truth) + "," + num(p.p_fake) + "," + to_string(p.label) + "\n";
    }
    write_text(out / "predictions.csv", csv);
    write_text(out / "metrics.json", json{{"split", split},
                                          {"config_hash", hash},
                                          {"accuracy", m.accuracy},
                                          {"loss", m.loss},
                                          {"n_videos", m.n},
                                          {"real_total", m.real_total},
                                          {"real_correct", m.real_correct},
                                          {"fake_total", m.fake_total},
                                          {"fake_correct", m.fake_correct}}
                                         .dump(2) + "\n");
}

}  // namespace

Metrics cmd_eval(const Config& cfg, const fs::path& data_dir, const fs::path& model_dir, const fs::path& out,
                 Split split, const Logger& log) {
    cfg.validate();
    Model model(model_dir);
    const nn::Ablation& a = model.info().ablation;
    Dataset d = load_dataset(data_dir, a.mm, a.F, model.info().net.frames);
    auto& samples = split == Split::Train ? d.train : split == Split::Val ? d.val : d.test;
    auto& crops = split == Split::Train ? d.train_crops : split == Split::Val ? d.val_crops : d.test_crops;
    if (a.F) fill_frame_scores(model.net(), samples, crops);
    const Metrics m = evaluate(model.net(), samples);
    ensure_dir(out);
    write_metrics(out, m, to_string(split), hex64(cfg.hash()));
    say(log, "eval " + std::string(to_string(split)) + " accuracy " + num(m.accuracy) + " on " + std::to_string(m.n));
    return m;
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

ExperimentReport cmd_ablation(const Config& cfg, const fs::path& data_dir, const fs::path& out, const Logger& log) {
    cfg.validate();
    ensure_dir(out / "logs");
    ExperimentReport report;
    report.command = "ablation";
    report.config_hash = hex64(cfg.hash());
    report.seed = cfg.seed;
    report.timestamp = timestamp_now();

    std::optional<Dataset> mm_data, raw_data;
    auto data = [&](bool mm) -> Dataset& {
        auto& slot = mm ? mm_data : raw_data;
        if (!slot) slot = load_dataset(data_dir, mm, mm);
        return *slot;
    };

    std::unique_ptr<nn::DualStAttenNet<float>> scorer;
    std::unique_ptr<nn::DualStAttenNet<float>> base_mm;  // trained DR-mmst
    std::string base_error;

    for (const nn::Ablation& a : nn::ablation_ladder()) {
        const std::string name = a.name();
        try {
            Dataset& d = data(a.mm);
            const nn::NetConfig ncfg = net_for(cfg, d);
            if (a.F && !scorer) {
                if (!a.mm) throw usage_error("frame scores are only prepared for magnified maps");
                scorer = std::make_unique<nn::DualStAttenNet<float>>(ncfg, nn::Ablation::parse("mm,F"),
                                                                     derive_seed(cfg.seed, kStreamMesoInit));
                const TrainResult r = train_frame_scorer(cfg, d, *scorer, log);
                write_text(out / "logs" / "meso.csv", log_csv(r.log));
            }
            auto net = make_net(cfg, ncfg, a);
            if (a.F) net->store().copy_from(scorer->store(), {"meso."});
            if (staged(a)) {
                if (!base_mm) throw data_error("DR-mmst classifier unavailable: " + base_error);
                net->store().copy_from(base_mm->store(), {"phi."});
            }
            const TrainResult r = train_stage2(cfg, *net, d, staged(a), log);
            write_text(out / "logs" / (name + ".csv"), log_csv(r.log));
            const Metrics m = evaluate(*net, d.test);
            report.rows.push_back({name, std::nullopt, m.accuracy, m.n, std::nullopt});
            say(log, name + " test accuracy " + num(m.accuracy));
            save_model(out / "models" / name, *net, {net->config(), a, report.config_hash, cfg.seed, r.best_epoch});
            if (a == base_of(a) && a.mm) base_mm = std::move(net);
        } catch (const Error& e) {
            if (a == base_of(a) && a.mm) base_error = e.what();
            report.absent.emplace_back(name, one_line(e.what()));
            say(log, name + " failed: " + e.what());
        }
    }

    std::string csv = "condition,accuracy,n_videos\n";
    for (const auto& r : report.rows) csv += r.condition + "," + num(r.accuracy) + "," + std::to_string(r.n_videos) + "\n";
    write_text(out / "ablation.csv", csv);
    write_text(out / "ablation.md", report.markdown());
    report.write_json(out / "ablation.json");
    return report;
}

// ---------------------------------------------------------------------------
// robustness
// ---------------------------------------------------------------------------

namespace {

MmstMap every_kth_row(const MmstMap& m, int k) {
    MmstMap out = m;
    out.T = (m.T + k - 1) / k;
    out.values.clear();
    for (int t = 0; t < m.T; t += k)
        for (int n = 0; n < m.N; ++n)
            for (int c = 0; c < m.C; ++c) out.values.push_back(m.at(t, n, c));
    out.fps = m.fps / k;
    return out;
}

}  // namespace

ExperimentReport cmd_robustness(const Config& cfg, const fs::path& manifest_path, const fs::path& model_dir,
                                const fs::path& out, const Logger& log) {
    cfg.validate();
    const DatasetManifest manifest = DatasetManifest::load(manifest_path);
    Model model(model_dir);
    Config xcfg = cfg;
    xcfg.net.meso_input = model.info().net.meso_input;
    const auto test = manifest.split(Split::Test);
    if (test.empty()) throw data_error("manifest has no test videos");

    ExperimentReport report;
    report.command = "robustness";
    report.config_hash = hex64(cfg.hash());
    report.seed = cfg.seed;
    report.timestamp = timestamp_now();

    struct Source {
        const ManifestEntry* entry;
        MmstMap reference;
        VideoSample sample;
    };
    std::vector<Source> sources;
    for (const ManifestEntry* e : test) {
        FrameSequence seq = load_frame_sequence(manifest.resolve(e->video), manifest.fps);
        seq.source_id = e->id;
        const LandmarkTrack track = load_landmark_track(manifest.resolve(e->landmarks), seq.size(), seq.height(), seq.width());
        const Extracted x = extract_video(seq, track, xcfg);
        VideoSample s = model.prepare(x, e->label);
        s.id = e->id;
        sources.push_back({e, x.magnified, std::move(s)});
    }

    ensure_dir(out);
    std::map<DegradationKind, std::string> per_kind;
    const std::string header = "condition,degree,accuracy,n_videos,mmst_rel_distance\n";
    {
        std::vector<VideoSample> clean;
        for (const Source& src : sources) clean.push_back(src.sample);
        const Metrics m = evaluate(model.net(), clean);
        report.rows.push_back({"none", std::nullopt, m.accuracy, m.n, 0.0});
        say(log, "undegraded accuracy " + num(m.accuracy));
    }
    for (const auto& [kind, degrees] : cfg.sweep) {
        for (double degree : degrees) {
            const std::string cell = std::string(to_string(kind)) + "(" + num(degree) + ")";
            try {
                std::vector<VideoSample> samples;
                double dist = 0.0;
                for (const Source& src : sources) {
                    const DegradationSpec spec{kind, degree, derive_seed(cfg.seed, kStreamDegrade, fnv1a(src.entry->id))};
                    FrameSequence seq = load_frame_sequence(manifest.resolve(src.entry->video), manifest.fps);
                    seq.source_id = src.entry->id;
                    const LandmarkTrack track =
                        load_landmark_track(manifest.resolve(src.entry->landmarks), seq.size(), seq.height(), seq.width());
                    const Extracted x = extract_video(degrade(seq, spec), degrade_track(track, spec), xcfg);
                    const int step = kind == DegradationKind::Sampling ? static_cast<int>(degree) : 1;
                    const MmstMap ref = step > 1 ? every_kth_row(src.reference, step) : src.reference;
                    if (ref.T != x.magnified.T) throw data_error("degraded map length differs from the reference rows");
                    dist += relative_distance(x.magnified, ref);
                    samples.push_back(model.prepare(x, src.entry->label));
                    samples.back().id = src.entry->id;
                }
                const Metrics m = evaluate(model.net(), samples);
                ReportRow row{to_string(kind), degree, m.accuracy, m.n, dist / static_cast<double>(sources.size())};
                report.rows.push_back(row);
                per_kind[kind] += std::string(to_string(kind)) + "," + num(degree) + "," + num(m.accuracy) + "," +
                                  std::to_string(m.n) + "," + num(*row.distance) + "\n";
                say(log, cell + " accuracy " + num(m.accuracy) + " distance " + num(*row.distance));
            } catch (const Error& e) {
                report.absent.emplace_back(cell, one_line(e.what()));
                say(log, cell + " absent: " + e.what());
            }
        }
    }
    const ReportRow& none = report.rows.front();
    std::string all = header + "none,," + num(none.accuracy) + "," + std::to_string(none.n_videos) + ",0\n";
    for (const auto& [kind, rows] : per_kind) {
        write_text(out / ("robustness_" + std::string(to_string(kind)) + ".csv"), header + rows);
        all += rows;
    }
    write_text(out / "robustness.csv", all);
    write_text(out / "robustness.md", report.markdown());
    report.write_json(out / "robustness.json");
    return report;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

void cmd_report(const fs::path& in_dir, const fs::path& out_file) {
    if (!fs::is_directory(in_dir)) throw data_error("not a directory: " + in_dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(in_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".json") continue;
        const std::string stem = e.path().stem().string();
        if (stem == "ablation" || stem == "robustness") files.push_back(e.path());
    }
    if (files.empty()) throw data_error("no ablation.json or robustness.json under " + in_dir.string());
    std::sort(files.begin(), files.end());
    std::string md = "# Experiment report\n\n";
    for (const auto& f : files) md += ExperimentReport::read_json(f).markdown() + "\n";
    write_text(out_file, md);
}

}  // namespace deeprhythm::harness
