#include "deeprhythm/deeprhythm.h"
#include "deeprhythm/error.hpp"
#include "deeprhythm/harness.hpp"

#include <algorithm>
#include <exception>
#include <memory>
#include <mutex>
#include <new>
#include <optional>
#include <string>

struct dr_config {
    deeprhythm::harness::Config cfg;
};

struct dr_model {
    std::unique_ptr<deeprhythm::harness::Model> model;
};

namespace {

using namespace deeprhythm;

thread_local std::string g_error;

std::mutex g_log_mutex;
dr_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

harness::Logger logger() {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    if (!g_log_fn) return {};
    dr_log_fn fn = g_log_fn;
    void* user = g_log_user;
    return [fn, user](const std::string& line) { fn(line.c_str(), user); };
}

template <class F>
dr_status guarded(F&& body) {
    g_error.clear();
    try {
        body();
        return DR_OK;
    } catch (const Error& e) {
        g_error = e.what();
        return static_cast<dr_status>(e.kind());
    } catch (const std::bad_alloc&) {
        g_error = "out of memory";
        return DR_ERR_DATA;
    } catch (const std::filesystem::filesystem_error& e) {
        g_error = e.what();
        return DR_ERR_DATA;
    } catch (const std::exception& e) {
        g_error = std::string("internal error: ") + e.what();
        return DR_ERR_DATA;
    }
}

void need(const void* p, const char* what) {
    if (!p) throw usage_error(std::string(what) + " is null");
}

}  // namespace

extern "C" {

void dr_set_logger(dr_log_fn fn, void* user) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    g_log_fn = fn;
    g_log_user = user;
}

const char* dr_last_error(void) { return g_error.c_str(); }

const char* dr_version(void) { return "0.1.0"; }

dr_status dr_config_load(const char* path, const char* preset, dr_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = nullptr;
        std::optional<std::string> p;
        if (preset) p = preset;
        auto c = std::make_unique<dr_config>();
        c->cfg = path ? harness::Config::load(path, p) : harness::Config::from_json_text("", p);
        *out = c.release();
    });
}

dr_status dr_config_from_json(const char* text, const char* preset, dr_config** out) {
    return guarded([&] {
        need(out, "out");
        need(text, "text");
        *out = nullptr;
        std::optional<std::string> p;
        if (preset) p = preset;
        auto c = std::make_unique<dr_config>();
        c->cfg = harness::Config::from_json_text(text, p);
        *out = c.release();
    });
}

void dr_config_free(dr_config* cfg) { delete cfg; }

dr_status dr_config_set_seed(dr_config* cfg, uint64_t seed) {
    return guarded([&] {
        need(cfg, "config");
        cfg->cfg.seed = seed;
    });
}

dr_status dr_config_set_ablation(dr_config* cfg, const char* flags) {
    return guarded([&] {
        need(cfg, "config");
        need(flags, "flags");
        cfg->cfg.ablation = nn::Ablation::parse(flags);
    });
}

dr_status dr_config_hash(const dr_config* cfg, uint64_t* out) {
    return guarded([&] {
        need(cfg, "config");
        need(out, "out");
        *out = cfg->cfg.hash();
    });
}

dr_status dr_config_json(const dr_config* cfg, char* buf, size_t cap, size_t* needed) {
    return guarded([&] {
        need(cfg, "config");
        const std::string s = cfg->cfg.to_json();
        if (needed) *needed = s.size();
        if (buf && cap > 0) {
            const std::size_t n = std::min(cap - 1, s.size());
            s.copy(buf, n);
            buf[n] = '\0';
        }
    });
}

dr_status dr_synth(const dr_config* cfg, const char* out_dir) {
    return guarded([&] {
        need(cfg, "config");
        need(out_dir, "out_dir");
        harness::cmd_synth(cfg->cfg, out_dir, logger());
    });
}

dr_status dr_extract(const dr_config* cfg, const char* manifest, const char* out_dir) {
    return guarded([&] {
        need(cfg, "config");
        need(manifest, "manifest");
        need(out_dir, "out_dir");
        harness::cmd_extract(cfg->cfg, manifest, out_dir, logger());
    });
}

dr_status dr_degrade(const dr_config* cfg, const char* manifest, const char* kind, double degree, const char* out_dir,
                     int all_splits) {
    return guarded([&] {
        need(cfg, "config");
        need(manifest, "manifest");
        need(kind, "kind");
        need(out_dir, "out_dir");
        harness::cmd_degrade(cfg->cfg, manifest, parse_degradation_kind(kind), degree, out_dir, all_splits != 0,
                             logger());
    });
}

dr_status dr_train(const dr_config* cfg, const char* data_dir, const char* out_dir) {
    return guarded([&] {
        need(cfg, "config");
        need(data_dir, "data_dir");
        need(out_dir, "out_dir");
        harness::cmd_train(cfg->cfg, data_dir, out_dir, logger());
    });
}

dr_status dr_eval(const dr_config* cfg, const char* data_dir, const char* model_dir, const char* out_dir,
                  const char* split, double* accuracy) {
    return guarded([&] {
        need(cfg, "config");
        need(data_dir, "data_dir");
        need(model_dir, "model_dir");
        need(out_dir, "out_dir");
        const Split s = split ? parse_split(split) : Split::Test;
        const Metrics m = harness::cmd_eval(cfg->cfg, data_dir, model_dir, out_dir, s, logger());
        if (accuracy) *accuracy = m.accuracy;
    });
}

dr_status dr_ablation(const dr_config* cfg, const char* data_dir, const char* out_dir) {
    return guarded([&] {
        need(cfg, "config");
        need(data_dir, "data_dir");
        need(out_dir, "out_dir");
        harness::cmd_ablation(cfg->cfg, data_dir, out_dir, logger());
    });
}

dr_status dr_robustness(const dr_config* cfg, const char* manifest, const char* model_dir, const char* out_dir) {
    return guarded([&] {
        need(cfg, "config");
        need(manifest, "manifest");
        need(model_dir, "model_dir");
        need(out_dir, "out_dir");
        harness::cmd_robustness(cfg->cfg, manifest, model_dir, out_dir, logger());
    });
}

dr_status dr_report(const char* in_dir, const char* out_file) {
    return guarded([&] {
        need(in_dir, "in_dir");
        need(out_file, "out_file");
        harness::cmd_report(in_dir, out_file);
    });
}

dr_status dr_model_load(const char* model_dir, dr_model** out) {
    return guarded([&] {
        need(model_dir, "model_dir");
        need(out, "out");
        *out = nullptr;
        auto m = std::make_unique<dr_model>();
        m->model = std::make_unique<harness::Model>(model_dir);
        *out = m.release();
    });
}

void dr_model_free(dr_model* model) { delete model; }

dr_status dr_model_score_video(dr_model* model, const dr_config* cfg, const char* frames_dir, const char* landmarks,
                               double fps, double* p_fake) {
    return guarded([&] {
        need(model, "model");
        need(cfg, "config");
        need(frames_dir, "frames_dir");
        need(landmarks, "landmarks");
        need(p_fake, "p_fake");
        FrameSequence seq = load_frame_sequence(frames_dir, fps);
        const LandmarkTrack track = load_landmark_track(landmarks, seq.size(), seq.height(), seq.width());
        harness::Config c = cfg->cfg;
        c.net.meso_input = model->model->info().net.meso_input;
        *p_fake = model->model->predict(harness::extract_video(seq, track, c));
    });
}

}  // extern "C"
