#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "geofuse/experiment.hpp"
#include "geofuse/gradcheck.hpp"

namespace {

int fail_with_json(const std::string& message) {
    nlohmann::json err;
    err["error"] = {{"message", message}};
    std::cout << err.dump() << std::endl;
    return 1;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

int cmd_run(const std::string& config_path, const std::string& out_override, const std::string& seeds_override,
            const std::string& variants_override, bool no_timestamps, int threads) {
    geofuse::ExperimentConfig cfg = geofuse::load_config(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (!variants_override.empty()) {
        cfg.variants.clear();
        for (const std::string& v : split_list(variants_override)) {
            cfg.variants.push_back(geofuse::variant_from_string(v));
        }
    }
    if (!seeds_override.empty()) {
        cfg.seeds.clear();
        for (const std::string& s : split_list(seeds_override)) cfg.seeds.push_back(std::stoull(s));
    }
    if (const char* env_seed = std::getenv("GEOFUSE_SEED")) {
        cfg.seeds = {std::stoull(env_seed)};
    }
    geofuse::RunOptions options;
    options.no_timestamps = no_timestamps;
    options.threads = threads;
    const geofuse::ExperimentReport report = geofuse::run_experiment(cfg, options);
    std::cout << "report written to " << cfg.output_dir << "/report.json ("
              << report.runs.size() << " runs)" << std::endl;
    if (!report.all_ok) {
        nlohmann::json err;
        err["error"] = {{"message", "one or more runs failed; see report.json"}};
        std::cout << err.dump() << std::endl;
        return 3;
    }
    return 0;
}

int cmd_gradcheck(double tol) {
    const std::vector<geofuse::GradCheckReport> reports = geofuse::gradcheck_suite(tol);
    bool all_pass = true;
    for (const auto& r : reports) {
        std::printf("[%s] %-20s max_rel_err=%.3e worst=%s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err,
                    r.worst_param.empty() ? "-" : r.worst_param.c_str());
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

int cmd_heatmap(const std::string& run_dir, int sample_index) {
    const std::vector<std::string> written = geofuse::export_heatmaps(run_dir, sample_index);
    for (const std::string& path : written) std::cout << path << "\n";
    return 0;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
    geofuse::ExperimentConfig cfg = geofuse::load_config(config_path);
    uint64_t seed = cfg.seeds.front();
    if (const char* env_seed = std::getenv("GEOFUSE_SEED")) seed = std::stoull(env_seed);
    const geofuse::Dataset data = geofuse::make_dataset(cfg.scene, cfg.data.n_train, cfg.data.n_test, seed);
    geofuse::write_jsonl(data, out_path);
    std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test samples to " << out_path
              << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geometry-aware fusion experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds, variants, run_dir, data_out;
    bool no_timestamps = false;
    int threads = 0;
    int sample_index = 0;
    double tol = 1e-4;

    CLI::App* run = app.add_subcommand("run", "train and evaluate the configured ablation grid");
    run->add_option("--config", config_path, "experiment config JSON")->required();
    run->add_option("--out", out_dir, "output directory override");
    run->add_option("--seeds", seeds, "comma-separated seed list override");
    run->add_option("--variants", variants, "comma-separated variant list override (a..f)");
    run->add_flag("--no-timestamps", no_timestamps, "omit timestamps for byte-reproducible reports");
    run->add_option("--threads", threads, "worker threads (default: hardware)");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification suite");
    gc->add_option("--tol", tol, "max relative error tolerance");

    CLI::App* hm = app.add_subcommand("heatmap", "export relevance and gate heatmap CSVs for one sample");
    hm->add_option("--run", run_dir, "run directory (out/runs/<id>)")->required();
    hm->add_option("--sample", sample_index, "test sample index")->required();

    CLI::App* gd = app.add_subcommand("gen-data", "emit the JSON-lines dataset for a config");
    gd->add_option("--config", config_path, "experiment config JSON")->required();
    gd->add_option("--out", data_out, "output .jsonl path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(config_path, out_dir, seeds, variants, no_timestamps, threads);
        if (gc->parsed()) return cmd_gradcheck(tol);
        if (hm->parsed()) return cmd_heatmap(run_dir, sample_index);
        if (gd->parsed()) return cmd_gen_data(config_path, data_out);
    } catch (const std::exception& e) {
        return fail_with_json(e.what());
    }
    return 1;
}
