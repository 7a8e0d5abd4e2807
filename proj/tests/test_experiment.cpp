#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "geofuse/experiment.hpp"

using namespace geofuse;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ExperimentConfig tiny_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.scene.grid = GridShape{3, 3, 2};
    cfg.scene.n_objects = 3;
    cfg.scene.question_type = QuestionType::FasterOfTwo;
    cfg.train.steps = 4;
    cfg.train.batch_size = 4;
    cfg.train.warmup_steps = 1;
    cfg.train.eval_every = 2;
    cfg.train.eval_samples = 16;
    cfg.train.l_b = 3;
    cfg.data.n_train = 32;
    cfg.data.n_test = 16;
    cfg.variants = {Variant::F};
    cfg.seeds = {1, 2};
    cfg.output_dir = out_dir;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
    const fs::path out = fs::temp_directory_path() / "geofuse_cli_capture.txt";
    const std::string cmd = std::string(GEOFUSE_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (output) *output = read_file(out);
    return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("experiment config round trips through JSON") {
    ExperimentConfig cfg = tiny_config("some/dir");
    cfg.sweep = SweepConfig{{0.4, 0.8}, {0.5}, false};
    cfg.seeds = {3, 4, 5};
    const nlohmann::json j = config_to_json(cfg);
    const ExperimentConfig back = config_from_json(j);
    CHECK(back == cfg);
    CHECK(config_to_json(back) == j);
}

TEST_CASE("config validation names the offending field") {
    ExperimentConfig cfg = tiny_config("x");
    cfg.train.mask.gamma = 1.5;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("gamma"), std::invalid_argument);

    ExperimentConfig cfg2 = tiny_config("x");
    cfg2.seeds.clear();
    CHECK_THROWS_WITH_AS(cfg2.validate(), doctest::Contains("seeds"), std::invalid_argument);

    ExperimentConfig cfg3 = tiny_config("x");
    cfg3.sweep = SweepConfig{};  // controls need variant d
    CHECK_THROWS_WITH_AS(cfg3.validate(), doctest::Contains("variant d"), std::invalid_argument);

    CHECK_THROWS_AS(variant_from_string("z"), std::invalid_argument);
}

TEST_CASE("mask mode derives from the pipeline family") {
    nlohmann::json j;
    j["scene"] = {{"question_type", "FasterOfTwo"}};
    CHECK(config_from_json(j).train.mask.mode == MaskMode::RelevanceTopK);
    CHECK(config_from_json(j).train.family == Family::QFormer);

    nlohmann::json j2;
    j2["scene"] = {{"question_type", "CloserToAnchor"}};
    CHECK(config_from_json(j2).train.mask.mode == MaskMode::Random);
    CHECK(config_from_json(j2).train.family == Family::Additive);

    // the appendix configuration: evidence-query wiring on the static task
    j2["qformer_on_static"] = true;
    CHECK(config_from_json(j2).train.family == Family::QFormer);
}

TEST_CASE("run_experiment produces one entry per (variant, seed) and is repeatable") {
    const fs::path dir1 = fresh_dir("geofuse_exp1");
    const fs::path dir2 = fresh_dir("geofuse_exp2");
    ExperimentConfig cfg = tiny_config(dir1.string());
    RunOptions opts;
    opts.no_timestamps = true;
    opts.threads = 2;
    const ExperimentReport r1 = run_experiment(cfg, opts);
    CHECK(r1.runs.size() == 2);
    CHECK(r1.all_ok);
    CHECK(fs::exists(dir1 / "report.json"));
    CHECK(fs::exists(dir1 / "summary.txt"));
    CHECK(fs::exists(dir1 / "runs" / "f_s1" / "history.csv"));
    CHECK(fs::exists(dir1 / "runs" / "f_s1" / "checkpoint" / "manifest.json"));

    cfg.output_dir = dir2.string();
    const ExperimentReport r2 = run_experiment(cfg, opts);
    CHECK(r1.to_json().dump(2) == r2.to_json().dump(2));
    CHECK(read_file(dir1 / "report.json") == read_file(dir2 / "report.json"));
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("cli run writes byte-identical reports with --no-timestamps") {
    const fs::path dir1 = fresh_dir("geofuse_cli1");
    const fs::path dir2 = fresh_dir("geofuse_cli2");
    const fs::path cfg_path = fs::temp_directory_path() / "geofuse_cli_cfg.json";
    ExperimentConfig cfg = tiny_config(dir1.string());
    {
        std::ofstream out(cfg_path, std::ios::binary);
        out << config_to_json(cfg).dump(2) << '\n';
    }
    std::string output;
    CHECK(run_cli("run --config " + cfg_path.string() + " --no-timestamps --threads 2", &output) == 0);
    CHECK(run_cli("run --config " + cfg_path.string() + " --no-timestamps --threads 2 --out " + dir2.string(),
                  &output) == 0);
    CHECK(read_file(dir1 / "report.json") == read_file(dir2 / "report.json"));
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    fs::remove(cfg_path);
}

TEST_CASE("cli reports config errors as machine-readable JSON") {
    const fs::path cfg_path = fs::temp_directory_path() / "geofuse_bad_cfg.json";
    {
        std::ofstream out(cfg_path, std::ios::binary);
        out << R"({"train": {"mask": {"gamma": 2.0}}})" << '\n';
    }
    std::string output;
    const int rc = run_cli("run --config " + cfg_path.string(), &output);
    CHECK(rc != 0);
    CHECK(output.find("\"error\"") != std::string::npos);
    CHECK(output.find("gamma") != std::string::npos);
    fs::remove(cfg_path);
}

TEST_CASE("cli seed overrides follow GEOFUSE_SEED") {
    const fs::path dir = fresh_dir("geofuse_env_seed");
    const fs::path cfg_path = fs::temp_directory_path() / "geofuse_env_cfg.json";
    ExperimentConfig cfg = tiny_config(dir.string());
    {
        std::ofstream out(cfg_path, std::ios::binary);
        out << config_to_json(cfg).dump(2) << '\n';
    }
    std::string output;
    const std::string cmd = "GEOFUSE_SEED=9 " + std::string(GEOFUSE_CLI_PATH) + " run --config " + cfg_path.string() +
                            " --no-timestamps > /dev/null 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    nlohmann::json report;
    std::ifstream in(dir / "report.json");
    in >> report;
    REQUIRE(report.at("runs").size() == 1);
    CHECK(report.at("runs").at(0).at("seed").get<int>() == 9);
    fs::remove_all(dir);
    fs::remove(cfg_path);
}

TEST_CASE("gen-data is bitwise deterministic and heatmaps export valid ranges") {
    const fs::path dir = fresh_dir("geofuse_run_for_heatmap");
    const fs::path cfg_path = fs::temp_directory_path() / "geofuse_hm_cfg.json";
    ExperimentConfig cfg = tiny_config(dir.string());
    cfg.variants = {Variant::A};
    cfg.seeds = {1};
    {
        std::ofstream out(cfg_path, std::ios::binary);
        out << config_to_json(cfg).dump(2) << '\n';
    }
    const fs::path data1 = fs::temp_directory_path() / "geofuse_data1.jsonl";
    const fs::path data2 = fs::temp_directory_path() / "geofuse_data2.jsonl";
    std::string output;
    REQUIRE(run_cli("gen-data --config " + cfg_path.string() + " --out " + data1.string(), &output) == 0);
    REQUIRE(run_cli("gen-data --config " + cfg_path.string() + " --out " + data2.string(), &output) == 0);
    CHECK(read_file(data1) == read_file(data2));

    REQUIRE(run_cli("run --config " + cfg_path.string() + " --no-timestamps --threads 2", &output) == 0);
    const std::string run_dir = (dir / "runs" / "a_s1").string();
    REQUIRE(run_cli("heatmap --run " + run_dir + " --sample 0", &output) == 0);
    CHECK(output.find("relevance_s0.csv") != std::string::npos);
    CHECK(output.find("gate_s0.csv") != std::string::npos);

    // every exported value obeys its range contract
    for (const char* name : {"relevance_s0.csv", "gate_s0.csv"}) {
        std::ifstream csv(fs::path(run_dir) / name);
        std::string line;
        std::getline(csv, line);
        CHECK(line == "t,h,w,value");
        const bool is_gate = std::string(name).rfind("gate", 0) == 0;
        int rows = 0;
        while (std::getline(csv, line)) {
            const double v = std::stod(line.substr(line.rfind(',') + 1));
            if (is_gate) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
            } else {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
            ++rows;
        }
        CHECK(rows == cfg.scene.grid.cells());
    }

    // missing run directory is a named error
    const int rc = run_cli("heatmap --run /nonexistent_run_dir --sample 0", &output);
    CHECK(rc != 0);
    CHECK(output.find("error") != std::string::npos);

    fs::remove_all(dir);
    fs::remove(cfg_path);
    fs::remove(data1);
    fs::remove(data2);
}

TEST_CASE("mask outcome identity for gamma=0 cells matches fusion-only wiring") {
    // gamma=0 keeps the mask empty even when enabled, so a full-wiring run
    // and the fusion-only variant evolve identically
    const fs::path dir = fresh_dir("geofuse_gamma0");
    ExperimentConfig cfg = tiny_config(dir.string());
    cfg.variants = {Variant::A, Variant::D};
    cfg.seeds = {4};
    cfg.train.mask.gamma = 0.0;
    RunOptions opts;
    opts.no_timestamps = true;
    opts.threads = 2;
    const ExperimentReport report = run_experiment(cfg, opts);
    REQUIRE(report.runs.size() == 2);
    CHECK(report.runs[0].final_test_acc == report.runs[1].final_test_acc);
    CHECK(report.runs[0].final_train_acc == report.runs[1].final_train_acc);
    fs::remove_all(dir);
}
