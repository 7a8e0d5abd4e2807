#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "geofuse/synthdata.hpp"
#include "geofuse/trainer.hpp"

namespace geofuse {

struct DataConfig {
    int n_train = 2048;
    int n_test = 512;
    bool operator==(const DataConfig&) const = default;
};

/// Masking-hyperparameter grid, run with the full wiring (variant a).
/// controls adds the gamma=0 and beta=0 cells, which degenerate to the
/// fusion-only wiring (variant d).
struct SweepConfig {
    std::vector<double> gammas{0.4, 0.6, 0.8};
    std::vector<double> betas{0.3, 0.5, 0.7};
    bool controls = true;
    bool operator==(const SweepConfig&) const = default;
};

struct ExperimentConfig {
    SceneConfig scene;
    TrainConfig train;
    DataConfig data;
    std::vector<Variant> variants{Variant::A, Variant::E, Variant::F};
    std::vector<uint64_t> seeds{1};
    std::optional<SweepConfig> sweep;
    bool qformer_on_static = false;
    std::string output_dir = "out";

    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

struct RunResult {
    std::string id;
    std::string kind;  // "variant" | "sweep" | "control"
    Variant variant = Variant::A;
    uint64_t seed = 0;
    double gamma = 0.0;
    double beta = 0.0;
    std::string status = "ok";  // "ok" | "failed"
    std::string error;
    double final_train_acc = 0.0;
    double final_test_acc = 0.0;
    std::optional<double> mean_gate;
    std::optional<double> mean_relevance;
    std::string history_csv;
};

struct VariantAggregate {
    double mean_test_acc = 0.0;
    double std_test_acc = 0.0;
    double mean_train_acc = 0.0;
    double std_train_acc = 0.0;
    int runs = 0;
};

struct SweepCellResult {
    double gamma = 0.0;
    double beta = 0.0;
    double mean_test_acc = 0.0;
};

struct SweepSection {
    std::vector<SweepCellResult> cells;
    SweepCellResult best;
    std::optional<double> control_gamma0_acc;
    std::optional<double> control_beta0_acc;
    std::optional<double> reference_d_acc;
};

struct ExperimentReport {
    int schema = 1;
    std::vector<RunResult> runs;
    std::map<std::string, VariantAggregate> aggregates;  // keyed by variant letter
    std::optional<SweepSection> sweep;
    std::optional<std::string> timestamp;
    bool all_ok = true;

    nlohmann::json to_json() const;
};

struct RunOptions {
    bool no_timestamps = false;
    int threads = 0;  // 0 means hardware concurrency
};

/// Executes every configured (variant, seed) run plus the optional sweep,
/// writes per-run artifacts and the aggregate report under
/// cfg.output_dir, and returns the report.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options);

/// report.json plus a human-readable summary.txt.
void write_report(const ExperimentReport& report, const std::string& out_dir);

/// Re-derives relevance and gate heatmaps for one test sample of a finished
/// run directory (checkpoint + run.json) and writes relevance.csv /
/// gate.csv with (t,h,w,value) rows. Returns the files written.
std::vector<std::string> export_heatmaps(const std::string& run_dir, int sample_index);

}  // namespace geofuse
