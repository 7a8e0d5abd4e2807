#include "geofuse/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace geofuse {

namespace {

constexpr int kRoleChannel = 2 + kClassChannels;  // 10

struct ObjectState {
    int cls = 0;
    int cell = 0;   // vision-grid cell index within one frame
    int gcell = 0;  // geometry-grid cell index within one frame
    double color[3] = {0, 0, 0};
    double pos[3] = {0, 0, 0};
    double vel[3] = {0, 0, 0};
};

int map_axis(int idx, int src_extent, int dst_extent) {
    if (src_extent <= 1) return 0;
    const double scaled = static_cast<double>(idx) * (dst_extent - 1) / (src_extent - 1);
    return static_cast<int>(std::lround(scaled));
}

double dist3(const double* a, const double* b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double speed_of(const double* vel) { return std::sqrt(vel[0] * vel[0] + vel[1] * vel[1] + vel[2] * vel[2]); }

}  // namespace

std::string to_string(QuestionType q) {
    return q == QuestionType::CloserToAnchor ? "CloserToAnchor" : "FasterOfTwo";
}

QuestionType question_type_from_string(const std::string& s) {
    if (s == "CloserToAnchor") return QuestionType::CloserToAnchor;
    if (s == "FasterOfTwo") return QuestionType::FasterOfTwo;
    throw_contract_error("unknown question type '" + s + "'");
}

void SceneConfig::validate() const {
    if (grid.h < 1 || grid.w < 1 || grid.t < 1) throw_contract_error("scene.grid extents must be positive");
    if (geometry_h < 1 || geometry_w < 1) throw_contract_error("scene.geometry grid extents must be positive");
    if (n_objects < 3) throw_contract_error("scene.n_objects must be >= 3");
    if (n_objects > grid.h * grid.w) {
        throw_contract_error("scene.n_objects " + std::to_string(n_objects) + " exceeds the " +
                             std::to_string(grid.h * grid.w) + " grid cells");
    }
    if (n_objects > kClassChannels) {
        throw_contract_error("scene.n_objects exceeds the " + std::to_string(kClassChannels) + " object classes");
    }
    if (shortcut_strength < 0.0 || shortcut_strength > 1.0) {
        throw_contract_error("scene.shortcut_strength must lie in [0,1]");
    }
    if (coordinate_range <= 0.0) throw_contract_error("scene.coordinate_range must be positive");
    if (c_v != c) throw_contract_error("scene.c_v must equal scene.c (vision and model widths agree)");
    if (c < kRoleChannel + kPromptTokens) {
        throw_contract_error("scene.c must be >= " + std::to_string(kRoleChannel + kPromptTokens));
    }
    if (c_g < 6) throw_contract_error("scene.c_g must be >= 6 (coordinates plus displacement)");
}

namespace {

// One attempt at a scene; returns false on a degenerate draw.
bool try_scene(const SceneConfig& cfg, Rng& rng, std::vector<ObjectState>& objects, int& anchor_idx,
               std::array<int, 2>& cand_idx, int& label) {
    const int n = cfg.n_objects;
    const int cells = cfg.grid.h * cfg.grid.w;

    // distinct classes and distinct cells
    std::vector<int> classes(kClassChannels);
    std::iota(classes.begin(), classes.end(), 0);
    for (int i = 0; i < n; ++i) std::swap(classes[i], classes[i + rng.below(kClassChannels - i)]);
    std::vector<int> cell_pool(static_cast<size_t>(cells));
    std::iota(cell_pool.begin(), cell_pool.end(), 0);
    for (int i = 0; i < n; ++i) std::swap(cell_pool[i], cell_pool[i + rng.below(cells - i)]);

    objects.assign(static_cast<size_t>(n), ObjectState{});
    for (int i = 0; i < n; ++i) {
        ObjectState& o = objects[static_cast<size_t>(i)];
        o.cls = classes[static_cast<size_t>(i)];
        o.cell = cell_pool[static_cast<size_t>(i)];
        const int ci = o.cell / cfg.grid.w;
        const int cj = o.cell % cfg.grid.w;
        o.gcell = map_axis(ci, cfg.grid.h, cfg.geometry_h) * cfg.geometry_w + map_axis(cj, cfg.grid.w, cfg.geometry_w);
        for (double& ch : o.color) ch = rng.uniform01();
        for (double& p : o.pos) p = rng.uniform(0.0, cfg.coordinate_range);
    }
    // geometry cells must stay distinct after grid mapping
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (objects[static_cast<size_t>(i)].gcell == objects[static_cast<size_t>(j)].gcell) return false;
        }
    }

    if (cfg.question_type == QuestionType::FasterOfTwo) {
        // The first two objects are the candidates. They approach each other
        // along x: the left one moves +x, the right one -x, with iid speeds.
        const double x0 = objects[0].pos[0], x1 = objects[1].pos[0];
        if (std::abs(x0 - x1) < 0.02 * cfg.coordinate_range) return false;
        const double speed0 = rng.uniform(0.2, 1.0);
        const double speed1 = rng.uniform(0.2, 1.0);
        if (std::abs(speed0 - speed1) < 1e-9) return false;
        anchor_idx = -1;
        cand_idx = x0 < x1 ? std::array<int, 2>{0, 1} : std::array<int, 2>{1, 0};
        objects[static_cast<size_t>(cand_idx[0])].vel[0] = speed0;   // left candidate heads right
        objects[static_cast<size_t>(cand_idx[1])].vel[0] = -speed1;  // right candidate heads left
        label = speed0 > speed1 ? 0 : 1;
        return true;
    }

    // CloserToAnchor: rank by z, anchor highest, next two are candidates
    std::vector<int> by_z(static_cast<size_t>(n));
    std::iota(by_z.begin(), by_z.end(), 0);
    std::sort(by_z.begin(), by_z.end(), [&](int a, int b) {
        return objects[static_cast<size_t>(a)].pos[2] > objects[static_cast<size_t>(b)].pos[2];
    });
    const int rank_checks = std::min(3, n - 1);
    for (int r = 0; r < rank_checks; ++r) {
        const double za = objects[static_cast<size_t>(by_z[static_cast<size_t>(r)])].pos[2];
        const double zb = objects[static_cast<size_t>(by_z[static_cast<size_t>(r + 1)])].pos[2];
        if (std::abs(za - zb) < 1e-6) return false;
    }
    anchor_idx = by_z[0];
    int c0 = by_z[1], c1 = by_z[2];
    const double xa = objects[static_cast<size_t>(c0)].pos[0];
    const double xb = objects[static_cast<size_t>(c1)].pos[0];
    if (std::abs(xa - xb) < 1e-6) return false;
    if (xa > xb) std::swap(c0, c1);
    cand_idx = {c0, c1};
    const double d0 = dist3(objects[static_cast<size_t>(c0)].pos, objects[static_cast<size_t>(anchor_idx)].pos);
    const double d1 = dist3(objects[static_cast<size_t>(c1)].pos, objects[static_cast<size_t>(anchor_idx)].pos);
    if (std::abs(d0 - d1) < 1e-6) return false;
    label = d0 < d1 ? 0 : 1;
    return true;
}

}  // namespace

namespace {

// Train-split marker agreement for one scene. Marker errors concentrate on
// near-tie speed gaps, so the marginal agreement over the gap distribution
// (|U-U'| for iid U[0.2,1] speeds) is exactly the configured strength: the
// hardest 2*(1-p) quantile agrees at chance, the rest always agrees.
double train_agree_prob(const SceneConfig& cfg, const std::vector<ObjectState>& objects,
                        const std::array<int, 2>& cand_idx) {
    const double p = cfg.shortcut_strength;
    if (cfg.question_type != QuestionType::FasterOfTwo || p < 0.5) return p;
    const double q = std::min(1.0, 2.0 * (1.0 - p));
    const double span = 1.0 - 0.2;
    const double threshold = span * (1.0 - std::sqrt(1.0 - q));
    const double gap = std::abs(speed_of(objects[static_cast<size_t>(cand_idx[0])].vel) -
                                speed_of(objects[static_cast<size_t>(cand_idx[1])].vel));
    return gap < threshold ? 0.5 : 1.0;
}

}  // namespace

Sample generate_sample(const SceneConfig& cfg, Split split, Rng& rng) {
    cfg.validate();
    std::vector<ObjectState> objects;
    int anchor_idx = -1;
    std::array<int, 2> cand_idx{};
    int label = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
        ok = try_scene(cfg, rng, objects, anchor_idx, cand_idx, label);
    }
    if (!ok) throw_contract_error("generate_sample: could not place a non-degenerate scene");

    const double p_agree = split == Split::Train ? train_agree_prob(cfg, objects, cand_idx) : 0.5;
    const int marked = rng.uniform01() < p_agree ? label : 1 - label;

    Sample s;
    s.label = label;
    s.marked_candidate = marked;
    s.shortcut_agrees = marked == label;
    s.split = split;
    s.anchor_cell = anchor_idx >= 0 ? objects[static_cast<size_t>(anchor_idx)].cell : -1;
    s.candidate_cells = {objects[static_cast<size_t>(cand_idx[0])].cell,
                         objects[static_cast<size_t>(cand_idx[1])].cell};
    s.candidate_classes = {objects[static_cast<size_t>(cand_idx[0])].cls,
                           objects[static_cast<size_t>(cand_idx[1])].cls};

    // vision: appearance per cell, constant across frames; signed marker on
    // the marked candidate's cell
    const int vcells = cfg.grid.h * cfg.grid.w;
    Tensor vision({cfg.grid.cells(), cfg.c});
    const int marked_cell = objects[static_cast<size_t>(cand_idx[static_cast<size_t>(marked)])].cell;
    const double marker_value = marked == 0 ? 1.0 : -1.0;
    for (int t = 0; t < cfg.grid.t; ++t) {
        for (const ObjectState& o : objects) {
            const int row = t * vcells + o.cell;
            vision.at2(row, o.cls) = 1.0;
            for (int k = 0; k < kColorChannels; ++k) vision.at2(row, kClassChannels + k) = o.color[k];
            if (o.cell == marked_cell) vision.at2(row, kMarkerChannel) = marker_value;
        }
    }
    s.vision = TokenSequence{std::move(vision), cfg.grid, StreamTag::Vision};

    // geometry: per-frame coordinates and displacement at each object's cell
    const int gcells = cfg.geometry_h * cfg.geometry_w;
    Tensor geometry({cfg.geometry_grid().cells(), cfg.c_g});
    for (int t = 0; t < cfg.grid.t; ++t) {
        for (const ObjectState& o : objects) {
            const int row = t * gcells + o.gcell;
            for (int k = 0; k < 3; ++k) geometry.at2(row, k) = o.pos[k] + t * o.vel[k];
            for (int k = 0; k < 3; ++k) geometry.at2(row, 3 + k) = o.vel[k];
        }
    }
    s.geometry = TokenSequence{std::move(geometry), cfg.geometry_grid(), StreamTag::Geometry};

    // prompt: question type, anchor id, candidate ids
    Tensor prompt({kPromptTokens, cfg.c});
    prompt.at2(0, cfg.question_type == QuestionType::CloserToAnchor ? 0 : 1) = 1.0;
    if (anchor_idx >= 0) prompt.at2(1, 2 + objects[static_cast<size_t>(anchor_idx)].cls) = 1.0;
    prompt.at2(2, 2 + s.candidate_classes[0]) = 1.0;
    prompt.at2(3, 2 + s.candidate_classes[1]) = 1.0;
    for (int tok = 0; tok < kPromptTokens; ++tok) prompt.at2(tok, kRoleChannel + tok) = 1.0;
    s.prompt = TokenSequence{std::move(prompt), std::nullopt, StreamTag::Prompt};
    return s;
}

Dataset make_dataset(const SceneConfig& cfg, int n_train, int n_test, uint64_t seed) {
    cfg.validate();
    if (n_train < 1 || n_test < 1) throw_contract_error("make_dataset: counts must be >= 1");
    Dataset d;
    d.train.reserve(static_cast<size_t>(n_train));
    d.test.reserve(static_cast<size_t>(n_test));
    for (int i = 0; i < n_train; ++i) {
        Rng rng = Rng::keyed(seed, {kDataStream, 0, static_cast<uint64_t>(i)});
        Sample s = generate_sample(cfg, Split::Train, rng);
        s.index = static_cast<uint64_t>(i);
        d.train.push_back(std::move(s));
    }
    for (int i = 0; i < n_test; ++i) {
        Rng rng = Rng::keyed(seed, {kDataStream, 1, static_cast<uint64_t>(i)});
        Sample s = generate_sample(cfg, Split::Test, rng);
        s.index = static_cast<uint64_t>(i);
        s.split = Split::Test;
        d.test.push_back(std::move(s));
    }
    return d;
}

namespace {

struct ParsedScene {
    // (geometry row at frame 0, position, velocity) per occupied cell
    struct Entry {
        int gcell;
        double pos[3];
        double vel[3];
    };
    std::vector<Entry> entries;
};

ParsedScene parse_geometry(const SceneConfig& cfg, const TokenSequence& geometry) {
    ParsedScene scene;
    const int gcells = cfg.geometry_h * cfg.geometry_w;
    for (int cell = 0; cell < gcells; ++cell) {
        const int row = cell;  // frame 0 block
        bool occupied = false;
        for (int ch = 0; ch < 6; ++ch) occupied = occupied || geometry.tokens.at2(row, ch) != 0.0;
        if (!occupied) continue;
        ParsedScene::Entry e;
        e.gcell = cell;
        for (int k = 0; k < 3; ++k) e.pos[k] = geometry.tokens.at2(row, k);
        for (int k = 0; k < 3; ++k) e.vel[k] = geometry.tokens.at2(row, 3 + k);
        scene.entries.push_back(e);
    }
    return scene;
}

}  // namespace

std::array<double, 2> oracle_features(const SceneConfig& cfg, const TokenSequence& geometry) {
    ParsedScene scene = parse_geometry(cfg, geometry);
    if (cfg.question_type == QuestionType::FasterOfTwo) {
        std::vector<const ParsedScene::Entry*> movers;
        for (const auto& e : scene.entries) {
            if (speed_of(e.vel) > 1e-12) movers.push_back(&e);
        }
        if (movers.size() != 2) throw_contract_error("oracle: expected exactly 2 moving objects");
        if (movers[0]->pos[0] > movers[1]->pos[0]) std::swap(movers[0], movers[1]);
        return {speed_of(movers[0]->vel), speed_of(movers[1]->vel)};
    }
    // anchor has the largest z, then two candidates by z, ordered by x
    std::vector<const ParsedScene::Entry*> all;
    for (const auto& e : scene.entries) all.push_back(&e);
    if (all.size() < 3) throw_contract_error("oracle: expected at least 3 objects");
    std::sort(all.begin(), all.end(), [](const auto* a, const auto* b) { return a->pos[2] > b->pos[2]; });
    const ParsedScene::Entry* anchor = all[0];
    const ParsedScene::Entry* c0 = all[1];
    const ParsedScene::Entry* c1 = all[2];
    if (c0->pos[0] > c1->pos[0]) std::swap(c0, c1);
    return {dist3(c0->pos, anchor->pos), dist3(c1->pos, anchor->pos)};
}

int oracle_label(const SceneConfig& cfg, const TokenSequence& geometry) {
    const std::array<double, 2> f = oracle_features(cfg, geometry);
    if (cfg.question_type == QuestionType::FasterOfTwo) return f[0] > f[1] ? 0 : 1;
    return f[0] < f[1] ? 0 : 1;
}

int shortcut_probe_prediction(const Sample& sample) {
    double s = 0.0;
    for (int row = 0; row < sample.vision.length(); ++row) s += sample.vision.tokens.at2(row, kMarkerChannel);
    return s >= 0.0 ? 0 : 1;
}

namespace {

nlohmann::json tensor_rows(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < t.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < t.cols(); ++j) row.push_back(t.at2(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

Tensor tensor_from_rows(const nlohmann::json& rows) {
    const int r = static_cast<int>(rows.size());
    const int c = static_cast<int>(rows.at(0).size());
    Tensor t({r, c});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) t.at2(i, j) = rows.at(static_cast<size_t>(i)).at(static_cast<size_t>(j)).get<double>();
    }
    return t;
}

}  // namespace

std::string sample_to_json(const Sample& s) {
    nlohmann::json j;
    j["index"] = s.index;
    j["split"] = s.split == Split::Train ? "train" : "test";
    j["label"] = s.label;
    j["shortcut_agrees"] = s.shortcut_agrees;
    j["vision"] = tensor_rows(s.vision.tokens);
    j["geometry"] = tensor_rows(s.geometry.tokens);
    j["prompt"] = tensor_rows(s.prompt.tokens);
    j["meta"] = {{"anchor_cell", s.anchor_cell},
                 {"candidate_cells", s.candidate_cells},
                 {"candidate_classes", s.candidate_classes},
                 {"marked_candidate", s.marked_candidate}};
    return j.dump();
}

Sample sample_from_json(const std::string& line, const SceneConfig& cfg) {
    const nlohmann::json j = nlohmann::json::parse(line);
    Sample s;
    s.index = j.at("index").get<uint64_t>();
    s.split = j.at("split").get<std::string>() == "train" ? Split::Train : Split::Test;
    s.label = j.at("label").get<int>();
    s.shortcut_agrees = j.at("shortcut_agrees").get<bool>();
    s.vision = TokenSequence{tensor_from_rows(j.at("vision")), cfg.grid, StreamTag::Vision};
    s.geometry = TokenSequence{tensor_from_rows(j.at("geometry")), cfg.geometry_grid(), StreamTag::Geometry};
    s.prompt = TokenSequence{tensor_from_rows(j.at("prompt")), std::nullopt, StreamTag::Prompt};
    const auto& meta = j.at("meta");
    s.anchor_cell = meta.at("anchor_cell").get<int>();
    s.candidate_cells = meta.at("candidate_cells").get<std::array<int, 2>>();
    s.candidate_classes = meta.at("candidate_classes").get<std::array<int, 2>>();
    s.marked_candidate = meta.at("marked_candidate").get<int>();
    return s;
}

void write_jsonl(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const Sample& s : data.train) out << sample_to_json(s) << '\n';
    for (const Sample& s : data.test) out << sample_to_json(s) << '\n';
}

Dataset read_jsonl(const std::string& path, const SceneConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    Dataset d;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Sample s = sample_from_json(line, cfg);
        (s.split == Split::Train ? d.train : d.test).push_back(std::move(s));
    }
    return d;
}

}  // namespace geofuse
