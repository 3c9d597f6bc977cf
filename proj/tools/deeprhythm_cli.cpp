// deeprhythm: command-line front end over the C API.

#include "deeprhythm/deeprhythm.h"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace {

void print_line(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

int fail(dr_status s) {
    std::fprintf(stderr, "error: %s\n", dr_last_error());
    return static_cast<int>(s);
}

struct ConfigDeleter {
    void operator()(dr_config* c) const { dr_config_free(c); }
};
using ConfigPtr = std::unique_ptr<dr_config, ConfigDeleter>;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rhythm-based fake face video detection: corpus, extraction, training, sweeps"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, preset, out, ablation;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Override the configured seed");
    app.add_option("--preset", preset, "Default set: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--out", out, "Output directory (file for report)");
    app.add_flag("-q,--quiet", quiet, "No progress lines");

    std::string manifest, data, model, kind, split = "test", in_dir;
    double degree = 0.0;
    bool all_splits = false;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus and split manifest");
    auto* extract = app.add_subcommand("extract", "Compute magnified/raw maps and face crops for a manifest");
    extract->add_option("--manifest", manifest, "Dataset manifest")->required();
    auto* degrade = app.add_subcommand("degrade", "Write a degraded copy of the test split");
    degrade->add_option("--manifest", manifest, "Dataset manifest")->required();
    degrade->add_option("--kind", kind, "jpeg, blur, noise or sampling")->required();
    degrade->add_option("--degree", degree, "Quality, kernel size, noise std (/255) or interval")->required();
    degrade->add_flag("--all-splits", all_splits, "Degrade every split");
    auto* train = app.add_subcommand("train", "Train one variant on an extraction directory");
    train->add_option("--data", data, "Extraction directory")->required();
    train->add_option("--ablation", ablation, "Variant flags, e.g. mm,A,P,B,F,e2e");
    auto* eval = app.add_subcommand("eval", "Evaluate a trained model");
    eval->add_option("--data", data, "Extraction directory")->required();
    eval->add_option("--model", model, "Model directory")->required();
    eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    auto* abl = app.add_subcommand("ablation", "Train and evaluate the eight-variant ladder");
    abl->add_option("--data", data, "Extraction directory")->required();
    auto* robust = app.add_subcommand("robustness", "Degradation sweep over the test split");
    robust->add_option("--manifest", manifest, "Dataset manifest")->required();
    robust->add_option("--model", model, "Model directory")->required();
    auto* report = app.add_subcommand("report", "Render ablation/robustness JSON reports as markdown");
    report->add_option("--in", in_dir, "Directory searched for reports")->required();
    auto* show = app.add_subcommand("config", "Print the effective configuration and its hash");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return DR_ERR_USAGE;
    }

    if (!quiet) dr_set_logger(print_line, nullptr);

    dr_config* raw = nullptr;
    dr_status s = dr_config_load(config_path.empty() ? nullptr : config_path.c_str(),
                                 preset.empty() ? nullptr : preset.c_str(), &raw);
    if (s != DR_OK) return fail(s);
    ConfigPtr cfg(raw);
    if (seed && (s = dr_config_set_seed(cfg.get(), *seed)) != DR_OK) return fail(s);
    if (!ablation.empty() && (s = dr_config_set_ablation(cfg.get(), ablation.c_str())) != DR_OK) return fail(s);

    if (show->parsed()) {
        std::size_t n = 0;
        dr_config_json(cfg.get(), nullptr, 0, &n);
        std::vector<char> buf(n + 1);
        dr_config_json(cfg.get(), buf.data(), buf.size(), &n);
        std::uint64_t h = 0;
        dr_config_hash(cfg.get(), &h);
        std::printf("%s\nhash %016llx\n", buf.data(), static_cast<unsigned long long>(h));
        return 0;
    }

    if (out.empty()) {
        std::fprintf(stderr, "error: --out is required\n");
        return DR_ERR_USAGE;
    }
    const char* o = out.c_str();

    if (synth->parsed()) {
        s = dr_synth(cfg.get(), o);
    } else if (extract->parsed()) {
        s = dr_extract(cfg.get(), manifest.c_str(), o);
    } else if (degrade->parsed()) {
        s = dr_degrade(cfg.get(), manifest.c_str(), kind.c_str(), degree, o, all_splits ? 1 : 0);
    } else if (train->parsed()) {
        s = dr_train(cfg.get(), data.c_str(), o);
    } else if (eval->parsed()) {
        double acc = 0.0;
        s = dr_eval(cfg.get(), data.c_str(), model.c_str(), o, split.c_str(), &acc);
        if (s == DR_OK) std::printf("accuracy %.6f\n", acc);
    } else if (abl->parsed()) {
        s = dr_ablation(cfg.get(), data.c_str(), o);
    } else if (robust->parsed()) {
        s = dr_robustness(cfg.get(), manifest.c_str(), model.c_str(), o);
    } else if (report->parsed()) {
        s = dr_report(in_dir.c_str(), o);
    }
    return s == DR_OK ? 0 : fail(s);
}
