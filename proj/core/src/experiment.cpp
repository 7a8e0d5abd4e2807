#include "geofuse/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "geofuse/checkpoint.hpp"

namespace geofuse {

namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
    scene.validate();
    train.validate();
    if (data.n_train < 1 || data.n_test < 1) throw_contract_error("data.n_train and data.n_test must be >= 1");
    if (variants.empty()) throw_contract_error("variants: at least one variant required");
    if (seeds.empty()) throw_contract_error("seeds: at least one seed required");
    if (sweep) {
        if (sweep->gammas.empty() || sweep->betas.empty()) {
            throw_contract_error("sweep.gammas and sweep.betas must be non-empty");
        }
        for (double g : sweep->gammas) {
            if (g < 0.0 || g > 1.0) throw_contract_error("sweep.gammas entries must lie in [0,1]");
        }
        for (double b : sweep->betas) {
            if (b < 0.0 || b > 1.0) throw_contract_error("sweep.betas entries must lie in [0,1]");
        }
        if (sweep->controls &&
            std::find(variants.begin(), variants.end(), Variant::D) == variants.end()) {
            throw_contract_error("sweep.controls needs variant d in variants as the fusion-only reference");
        }
    }
    if (output_dir.empty()) throw_contract_error("output_dir must be non-empty");
    PipelineSpec spec{train.family, Variant::A, train.mask};
    spec.validate();
}

namespace {

nlohmann::json scene_to_json(const SceneConfig& s) {
    return {{"grid", {s.grid.h, s.grid.w, s.grid.t}},
            {"geometry_grid", {s.geometry_h, s.geometry_w}},
            {"n_objects", s.n_objects},
            {"channels", {{"c_v", s.c_v}, {"c_g", s.c_g}, {"c", s.c}}},
            {"shortcut_strength", s.shortcut_strength},
            {"question_type", to_string(s.question_type)},
            {"coordinate_range", s.coordinate_range}};
}

SceneConfig scene_from_json(const nlohmann::json& j) {
    SceneConfig s;
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        s.grid = GridShape{g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
    }
    if (j.contains("geometry_grid")) {
        s.geometry_h = j.at("geometry_grid").at(0).get<int>();
        s.geometry_w = j.at("geometry_grid").at(1).get<int>();
    } else {
        s.geometry_h = s.grid.h;
        s.geometry_w = s.grid.w;
    }
    s.n_objects = j.value("n_objects", s.n_objects);
    if (j.contains("channels")) {
        const auto& c = j.at("channels");
        s.c_v = c.value("c_v", s.c_v);
        s.c_g = c.value("c_g", s.c_g);
        s.c = c.value("c", s.c);
    }
    s.shortcut_strength = j.value("shortcut_strength", s.shortcut_strength);
    if (j.contains("question_type")) s.question_type = question_type_from_string(j.at("question_type"));
    s.coordinate_range = j.value("coordinate_range", s.coordinate_range);
    return s;
}

nlohmann::json train_to_json(const TrainConfig& t) {
    return {{"steps", t.steps},
            {"batch_size", t.batch_size},
            {"lr_peak", t.lr_peak},
            {"warmup_steps", t.warmup_steps},
            {"schedule", to_string(t.schedule)},
            {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
            {"seed", t.seed},
            {"mask", {{"mode", to_string(t.mask.mode)}, {"gamma", t.mask.gamma}, {"beta", t.mask.beta}}},
            {"variant", to_string(t.variant)},
            {"family", to_string(t.family)},
            {"n_layers", t.n_layers},
            {"heads", t.heads},
            {"bottleneck_len", t.l_b},
            {"eval_every", t.eval_every},
            {"eval_samples", t.eval_samples}};
}

TrainConfig train_from_json(const nlohmann::json& j, Family derived_family) {
    TrainConfig t;
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.lr_peak = j.value("lr_peak", t.lr_peak);
    t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
    if (j.contains("schedule")) t.schedule = schedule_from_string(j.at("schedule"));
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        t.adam.beta1 = a.value("beta1", t.adam.beta1);
        t.adam.beta2 = a.value("beta2", t.adam.beta2);
        t.adam.eps = a.value("eps", t.adam.eps);
    }
    t.seed = j.value("seed", t.seed);
    t.family = j.contains("family") ? family_from_string(j.at("family")) : derived_family;
    if (j.contains("mask")) {
        const auto& m = j.at("mask");
        const std::string mode = m.value("mode", std::string("auto"));
        t.mask.mode = mode == "auto"
                          ? (t.family == Family::QFormer ? MaskMode::RelevanceTopK : MaskMode::Random)
                          : mask_mode_from_string(mode);
        t.mask.gamma = m.value("gamma", t.mask.gamma);
        t.mask.beta = m.value("beta", t.mask.beta);
    } else {
        t.mask.mode = t.family == Family::QFormer ? MaskMode::RelevanceTopK : MaskMode::Random;
    }
    if (j.contains("variant")) t.variant = variant_from_string(j.at("variant"));
    t.n_layers = j.value("n_layers", t.n_layers);
    t.heads = j.value("heads", t.heads);
    t.l_b = j.value("bottleneck_len", t.l_b);
    t.eval_every = j.value("eval_every", t.eval_every);
    t.eval_samples = j.value("eval_samples", t.eval_samples);
    return t;
}

}  // namespace

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["scene"] = scene_to_json(cfg.scene);
    j["train"] = train_to_json(cfg.train);
    j["data"] = {{"n_train", cfg.data.n_train}, {"n_test", cfg.data.n_test}};
    nlohmann::json vs = nlohmann::json::array();
    for (Variant v : cfg.variants) vs.push_back(to_string(v));
    j["variants"] = std::move(vs);
    j["seeds"] = cfg.seeds;
    if (cfg.sweep) {
        j["sweep"] = {{"gammas", cfg.sweep->gammas}, {"betas", cfg.sweep->betas}, {"controls", cfg.sweep->controls}};
    }
    j["qformer_on_static"] = cfg.qformer_on_static;
    j["output_dir"] = cfg.output_dir;
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;
    if (j.contains("scene")) cfg.scene = scene_from_json(j.at("scene"));
    cfg.qformer_on_static = j.value("qformer_on_static", false);
    const Family derived = (cfg.scene.question_type == QuestionType::FasterOfTwo || cfg.qformer_on_static)
                               ? Family::QFormer
                               : Family::Additive;
    cfg.train = train_from_json(j.contains("train") ? j.at("train") : nlohmann::json::object(), derived);
    if (j.contains("data")) {
        cfg.data.n_train = j.at("data").value("n_train", cfg.data.n_train);
        cfg.data.n_test = j.at("data").value("n_test", cfg.data.n_test);
    }
    if (j.contains("variants")) {
        cfg.variants.clear();
        for (const auto& v : j.at("variants")) cfg.variants.push_back(variant_from_string(v));
    }
    if (j.contains("seeds")) {
        cfg.seeds.clear();
        for (const auto& s : j.at("seeds")) cfg.seeds.push_back(s.get<uint64_t>());
    }
    if (j.contains("sweep") && !j.at("sweep").is_null()) {
        SweepConfig sw;
        const auto& s = j.at("sweep");
        if (s.contains("gammas")) sw.gammas = s.at("gammas").get<std::vector<double>>();
        if (s.contains("betas")) sw.betas = s.at("betas").get<std::vector<double>>();
        sw.controls = s.value("controls", sw.controls);
        cfg.sweep = sw;
    }
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j;
    in >> j;
    return config_from_json(j);
}

namespace {

struct RunPlanEntry {
    std::string id;
    std::string kind;  // variant | sweep | control
    Variant variant = Variant::A;
    uint64_t seed = 0;
    double gamma = 0.0;
    double beta = 0.0;
};

std::string format_ratio(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::vector<RunPlanEntry> build_plan(const ExperimentConfig& cfg) {
    std::vector<RunPlanEntry> plan;
    for (Variant v : cfg.variants) {
        for (uint64_t seed : cfg.seeds) {
            plan.push_back({to_string(v) + "_s" + std::to_string(seed), "variant", v, seed, cfg.train.mask.gamma,
                            cfg.train.mask.beta});
        }
    }
    if (cfg.sweep) {
        for (double gamma : cfg.sweep->gammas) {
            for (double beta : cfg.sweep->betas) {
                for (uint64_t seed : cfg.seeds) {
                    plan.push_back({"sweep_g" + format_ratio(gamma) + "_b" + format_ratio(beta) + "_s" +
                                        std::to_string(seed),
                                    "sweep", Variant::A, seed, gamma, beta});
                }
            }
        }
        if (cfg.sweep->controls) {
            for (uint64_t seed : cfg.seeds) {
                plan.push_back({"control_g0_s" + std::to_string(seed), "control", Variant::A, seed, 0.0,
                                cfg.train.mask.beta});
                plan.push_back({"control_b0_s" + std::to_string(seed), "control", Variant::A, seed,
                                cfg.train.mask.gamma, 0.0});
            }
        }
    }
    return plan;
}

struct ProbeStats {
    std::optional<double> mean_gate_value;
    std::optional<double> mean_relevance_value;
};

ProbeStats probe_diagnostics(ModelParams& model, const PipelineSpec& spec, std::span<const Sample> samples) {
    PipelineSpec infer = spec;
    infer.mask.mode = MaskMode::Disabled;
    double gate_acc = 0.0, rel_acc = 0.0;
    int gate_n = 0, rel_n = 0;
    for (const Sample& s : samples) {
        Graph g;
        ParamBinder bind(g);
        FuseInputs in{&s.vision, &s.geometry, &s.prompt};
        FusedResult out = fuse_variant(bind, model.fusion, infer, in, nullptr);
        if (out.gate) {
            const std::vector<double> per_token = mean_gate(*out.gate);
            double m = 0.0;
            for (double v : per_token) m += v;
            gate_acc += m / static_cast<double>(per_token.size());
            ++gate_n;
        }
        if (out.relevance) {
            double m = 0.0;
            for (double v : out.relevance->s) m += v;
            rel_acc += m / static_cast<double>(out.relevance->s.size());
            ++rel_n;
        }
    }
    ProbeStats stats;
    if (gate_n > 0) stats.mean_gate_value = gate_acc / gate_n;
    if (rel_n > 0) stats.mean_relevance_value = rel_acc / rel_n;
    return stats;
}

void write_run_manifest(const std::string& run_dir, const ExperimentConfig& cfg, const TrainConfig& tc) {
    nlohmann::json j;
    j["schema"] = 1;
    j["scene"] = scene_to_json(cfg.scene);
    j["train"] = train_to_json(tc);
    j["data"] = {{"n_train", cfg.data.n_train}, {"n_test", cfg.data.n_test}};
    std::ofstream out(fs::path(run_dir) / "run.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write run manifest in " + run_dir);
    out << j.dump(2) << '\n';
}

RunResult execute_one(const ExperimentConfig& cfg, const RunPlanEntry& plan, const std::string& out_dir) {
    RunResult r;
    r.id = plan.id;
    r.kind = plan.kind;
    r.variant = plan.variant;
    r.seed = plan.seed;
    r.gamma = plan.gamma;
    r.beta = plan.beta;
    const std::string run_dir = (fs::path(out_dir) / "runs" / plan.id).string();
    try {
        fs::create_directories(run_dir);
        TrainConfig tc = cfg.train;
        tc.variant = plan.variant;
        tc.seed = plan.seed;
        tc.mask.gamma = plan.gamma;
        tc.mask.beta = plan.beta;
        write_run_manifest(run_dir, cfg, tc);

        const Dataset data = make_dataset(cfg.scene, cfg.data.n_train, cfg.data.n_test, plan.seed);
        TrainOutcome outcome = train(cfg.scene, data, tc);

        write_history_csv(outcome.history, (fs::path(run_dir) / "history.csv").string());
        save_checkpoint((fs::path(run_dir) / "checkpoint").string(), outcome.params);

        const size_t probe_n = std::min<size_t>(32, data.test.size());
        const ProbeStats stats = probe_diagnostics(outcome.params, pipeline_spec(tc),
                                                   std::span<const Sample>(data.test.data(), probe_n));
        r.final_train_acc = outcome.final_train_acc;
        r.final_test_acc = outcome.final_test_acc;
        r.mean_gate = stats.mean_gate_value;
        r.mean_relevance = stats.mean_relevance_value;
        r.history_csv = "runs/" + plan.id + "/history.csv";
    } catch (const std::exception& e) {
        r.status = "failed";
        r.error = e.what();
    }
    return r;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - m) * (x - m);
    var /= static_cast<double>(xs.size());
    return {m, std::sqrt(var)};
}

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
    cfg.validate();
    const std::vector<RunPlanEntry> plan = build_plan(cfg);
    fs::create_directories(cfg.output_dir);

    std::vector<RunResult> results(plan.size());
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    const int n_threads = std::max(1, std::min<int>(options.threads > 0 ? options.threads : hw,
                                                    static_cast<int>(plan.size())));
    std::atomic<size_t> next{0};
    const auto worker = [&]() {
        for (size_t i = next.fetch_add(1); i < plan.size(); i = next.fetch_add(1)) {
            results[i] = execute_one(cfg, plan[i], cfg.output_dir);
        }
    };
    std::vector<std::thread> threads;
    for (int i = 0; i < n_threads; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();

    ExperimentReport report;
    report.runs = std::move(results);
    for (const RunResult& r : report.runs) {
        if (r.status != "ok") report.all_ok = false;
    }

    for (Variant v : cfg.variants) {
        std::vector<double> test_accs, train_accs;
        for (const RunResult& r : report.runs) {
            if (r.kind == "variant" && r.variant == v && r.status == "ok") {
                test_accs.push_back(r.final_test_acc);
                train_accs.push_back(r.final_train_acc);
            }
        }
        VariantAggregate agg;
        std::tie(agg.mean_test_acc, agg.std_test_acc) = mean_std(test_accs);
        std::tie(agg.mean_train_acc, agg.std_train_acc) = mean_std(train_accs);
        agg.runs = static_cast<int>(test_accs.size());
        report.aggregates[to_string(v)] = agg;
    }

    if (cfg.sweep) {
        SweepSection sweep;
        for (double gamma : cfg.sweep->gammas) {
            for (double beta : cfg.sweep->betas) {
                std::vector<double> accs;
                for (const RunResult& r : report.runs) {
                    if (r.kind == "sweep" && r.gamma == gamma && r.beta == beta && r.status == "ok") {
                        accs.push_back(r.final_test_acc);
                    }
                }
                sweep.cells.push_back({gamma, beta, mean_std(accs).first});
            }
        }
        sweep.best = sweep.cells.front();
        for (const SweepCellResult& cell : sweep.cells) {
            if (cell.mean_test_acc > sweep.best.mean_test_acc) sweep.best = cell;
        }
        if (cfg.sweep->controls) {
            std::vector<double> g0, b0;
            for (const RunResult& r : report.runs) {
                if (r.kind != "control" || r.status != "ok") continue;
                if (r.id.rfind("control_g0_", 0) == 0) g0.push_back(r.final_test_acc);
                if (r.id.rfind("control_b0_", 0) == 0) b0.push_back(r.final_test_acc);
            }
            if (!g0.empty()) sweep.control_gamma0_acc = mean_std(g0).first;
            if (!b0.empty()) sweep.control_beta0_acc = mean_std(b0).first;
            const auto d_it = report.aggregates.find("d");
            if (d_it != report.aggregates.end() && d_it->second.runs > 0) {
                sweep.reference_d_acc = d_it->second.mean_test_acc;
            }
        }
        report.sweep = std::move(sweep);
    }

    if (!options.no_timestamps) report.timestamp = iso_timestamp();
    write_report(report, cfg.output_dir);
    return report;
}

nlohmann::json ExperimentReport::to_json() const {
    nlohmann::json j;
    j["schema"] = schema;
    j["all_ok"] = all_ok;
    nlohmann::json runs_json = nlohmann::json::array();
    for (const RunResult& r : runs) {
        nlohmann::json rj = {{"id", r.id},
                             {"kind", r.kind},
                             {"variant", to_string(r.variant)},
                             {"seed", r.seed},
                             {"gamma", r.gamma},
                             {"beta", r.beta},
                             {"status", r.status},
                             {"final_train_acc", r.final_train_acc},
                             {"final_test_acc", r.final_test_acc},
                             {"history_csv", r.history_csv}};
        rj["mean_gate"] = r.mean_gate ? nlohmann::json(*r.mean_gate) : nlohmann::json();
        rj["mean_relevance"] = r.mean_relevance ? nlohmann::json(*r.mean_relevance) : nlohmann::json();
        if (!r.error.empty()) rj["error"] = r.error;
        runs_json.push_back(std::move(rj));
    }
    j["runs"] = std::move(runs_json);
    nlohmann::json aggregates_json = nlohmann::json::object();
    for (const auto& [variant, agg] : aggregates) {
        aggregates_json[variant] = {{"mean_test_acc", agg.mean_test_acc},
                                    {"std_test_acc", agg.std_test_acc},
                                    {"mean_train_acc", agg.mean_train_acc},
                                    {"std_train_acc", agg.std_train_acc},
                                    {"runs", agg.runs}};
    }
    j["aggregates"] = std::move(aggregates_json);
    if (sweep) {
        nlohmann::json cells = nlohmann::json::array();
        for (const SweepCellResult& c : sweep->cells) {
            cells.push_back({{"gamma", c.gamma}, {"beta", c.beta}, {"mean_test_acc", c.mean_test_acc}});
        }
        nlohmann::json sj;
        sj["cells"] = std::move(cells);
        sj["best"] = {{"gamma", sweep->best.gamma}, {"beta", sweep->best.beta},
                      {"mean_test_acc", sweep->best.mean_test_acc}};
        if (sweep->control_gamma0_acc) sj["control_gamma0_acc"] = *sweep->control_gamma0_acc;
        if (sweep->control_beta0_acc) sj["control_beta0_acc"] = *sweep->control_beta0_acc;
        if (sweep->reference_d_acc) sj["reference_d_acc"] = *sweep->reference_d_acc;
        j["sweep"] = std::move(sj);
    }
    if (timestamp) j["timestamp"] = *timestamp;
    return j;
}

void write_report(const ExperimentReport& report, const std::string& out_dir) {
    fs::create_directories(out_dir);
    {
        std::ofstream out(fs::path(out_dir) / "report.json", std::ios::binary);
        if (!out) throw std::runtime_error("cannot write report.json in " + out_dir);
        out << report.to_json().dump(2) << '\n';
    }
    std::ofstream out(fs::path(out_dir) / "summary.txt", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write summary.txt in " + out_dir);
    char buf[160];
    out << "variant  runs  mean_test_acc  std_test_acc  mean_train_acc\n";
    for (const auto& [variant, agg] : report.aggregates) {
        std::snprintf(buf, sizeof(buf), "%-7s  %4d  %13.4f  %12.4f  %14.4f\n", variant.c_str(), agg.runs,
                      agg.mean_test_acc, agg.std_test_acc, agg.mean_train_acc);
        out << buf;
    }
    if (report.sweep) {
        out << "\nsweep (gamma, beta) -> mean_test_acc\n";
        for (const SweepCellResult& c : report.sweep->cells) {
            std::snprintf(buf, sizeof(buf), "  (%g, %g) -> %.4f\n", c.gamma, c.beta, c.mean_test_acc);
            out << buf;
        }
        std::snprintf(buf, sizeof(buf), "best cell: gamma=%g beta=%g acc=%.4f\n", report.sweep->best.gamma,
                      report.sweep->best.beta, report.sweep->best.mean_test_acc);
        out << buf;
    }
    for (const RunResult& r : report.runs) {
        if (r.status != "ok") out << "FAILED " << r.id << ": " << r.error << "\n";
    }
}

std::vector<std::string> export_heatmaps(const std::string& run_dir, int sample_index) {
    const fs::path manifest_path = fs::path(run_dir) / "run.json";
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw std::runtime_error("no run manifest at " + manifest_path.string());
    nlohmann::json j;
    in >> j;
    const SceneConfig scene = scene_from_json(j.at("scene"));
    const TrainConfig tc = train_from_json(j.at("train"), Family::QFormer);
    const int n_test = j.at("data").value("n_test", 0);
    if (sample_index < 0 || sample_index >= n_test) {
        throw_contract_error("sample index " + std::to_string(sample_index) + " outside the test split of " +
                             std::to_string(n_test) + " samples");
    }

    ModelParams model = ModelParams::create(scene, tc);
    load_checkpoint((fs::path(run_dir) / "checkpoint").string(), model);

    Rng rng = Rng::keyed(tc.seed, {kDataStream, 1, static_cast<uint64_t>(sample_index)});
    const Sample sample = generate_sample(scene, Split::Test, rng);

    PipelineSpec spec = pipeline_spec(tc);
    spec.mask.mode = MaskMode::Disabled;
    Graph g;
    ParamBinder bind(g);
    FuseInputs inputs{&sample.vision, &sample.geometry, &sample.prompt};
    FusedResult out = fuse_variant(bind, model.fusion, spec, inputs, nullptr);

    std::vector<std::string> written;
    if (out.relevance) {
        const fs::path p = fs::path(run_dir) / ("relevance_s" + std::to_string(sample_index) + ".csv");
        std::ofstream csv(p, std::ios::binary);
        write_grid_csv(out.relevance->s, scene.grid, false, csv);
        written.push_back(p.string());
    }
    if (out.gate) {
        const fs::path p = fs::path(run_dir) / ("gate_s" + std::to_string(sample_index) + ".csv");
        std::ofstream csv(p, std::ios::binary);
        const std::vector<double> alpha = mean_gate(*out.gate);
        write_grid_csv(alpha, *out.fused_grid, false, csv);
        written.push_back(p.string());
    }
    if (written.empty()) {
        throw_contract_error("run " + run_dir + " has neither relevance nor gate diagnostics (variant " +
                             to_string(tc.variant) + ")");
    }
    return written;
}

}  // namespace geofuse
