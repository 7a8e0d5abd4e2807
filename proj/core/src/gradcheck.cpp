#include "geofuse/gradcheck.hpp"

#include <cmath>
#include <map>
#include <memory>

#include "geofuse/attention.hpp"
#include "geofuse/backbone.hpp"
#include "geofuse/fusion.hpp"
#include "geofuse/synthdata.hpp"
#include "geofuse/trainer.hpp"

namespace geofuse {

GradCheckReport finite_diff_check(const std::string& name, const ParamRefs& params, const LossBuilder& build,
                                  double fd_step, double tol, std::optional<std::pair<OpKind, double>> corrupt_vjp) {
    // analytic pass
    std::map<std::string, Tensor> analytic;
    {
        Graph g;
        if (corrupt_vjp) g.corrupt_vjp_for_test(corrupt_vjp->first, corrupt_vjp->second);
        ParamBinder bind(g);
        Value loss = build(bind);
        g.backward(loss);
        for (const auto& [path, value] : bind.bound()) {
            if (g.has_grad(value)) analytic.emplace(path, g.grad(value));
        }
    }

    const auto forward = [&]() {
        Graph g;
        ParamBinder bind(g);
        return build(bind).tensor().at(0);
    };

    GradCheckReport report{name, 0.0, "", false};
    for (const auto& [path, tensor] : params) {
        const auto ait = analytic.find(path);
        for (int i = 0; i < tensor->size(); ++i) {
            const double keep = tensor->at(i);
            tensor->at(i) = keep + fd_step;
            const double up = forward();
            tensor->at(i) = keep - fd_step;
            const double down = forward();
            tensor->at(i) = keep;
            const double numeric = (up - down) / (2.0 * fd_step);
            const double a = ait == analytic.end() ? 0.0 : ait->second.at(i);
            const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = path + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t.at(i) = scale * rng.normal();
    return t;
}

struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor& add(const std::string& name, Tensor t) {
        items.emplace_back(name, std::move(t));
        return items.back().second;
    }
    ParamRefs refs() {
        ParamRefs out;
        for (auto& [name, t] : items) out.emplace_back(name, &t);
        return out;
    }
    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : items) {
            if (n == name) return t;
        }
        throw std::logic_error("no tensor named " + name);
    }
};

GradCheckReport check_matmul(double fd, double tol) {
    auto state = std::make_shared<NamedTensors>();
    Rng rng(101);
    state->add("a", random_tensor({3, 4}, rng));
    state->add("b", random_tensor({4, 2}, rng));
    const auto build = [state](ParamBinder& bind) {
        Graph& g = bind.graph();
        return g.sum_all(g.matmul(bind("a", state->get("a")), bind("b", state->get("b"))));
    };
    auto refs = state->refs();
    return finite_diff_check("matmul", refs, build, fd, tol);
}

GradCheckReport check_softmax(double fd, double tol) {
    auto state = std::make_shared<NamedTensors>();
    Rng rng(102);
    state->add("x", random_tensor({2, 5}, rng));
    auto weights = std::make_shared<Tensor>(random_tensor({2, 5}, rng));
    const auto build = [state, weights](ParamBinder& bind) {
        Graph& g = bind.graph();
        return g.sum_all(g.mul(g.softmax(bind("x", state->get("x")), 1), g.leaf(*weights)));
    };
    auto refs = state->refs();
    return finite_diff_check("softmax", refs, build, fd, tol);
}

GradCheckReport check_layer_norm(double fd, double tol, const NumericsConfig& cfg) {
    auto state = std::make_shared<NamedTensors>();
    Rng rng(103);
    state->add("x", random_tensor({3, 5}, rng));
    state->add("gain", random_tensor({5}, rng, 0.5));
    state->add("bias", random_tensor({5}, rng, 0.5));
    auto weights = std::make_shared<Tensor>(random_tensor({3, 5}, rng));
    const double eps = cfg.ln_epsilon;
    const auto build = [state, weights, eps](ParamBinder& bind) {
        Graph& g = bind.graph();
        Value y = g.layer_norm(bind("x", state->get("x")), bind("gain", state->get("gain")),
                               bind("bias", state->get("bias")), eps);
        return g.sum_all(g.mul(y, g.leaf(*weights)));
    };
    auto refs = state->refs();
    return finite_diff_check("layer_norm", refs, build, fd, tol);
}

GradCheckReport check_mlp(double fd, double tol) {
    Rng rng(104);
    auto mlp = std::make_shared<MlpParams>(MlpParams::create(8, 16, 8, rng));
    auto state = std::make_shared<NamedTensors>();
    state->add("x", random_tensor({4, 8}, rng));
    auto weights = std::make_shared<Tensor>(random_tensor({4, 8}, rng));
    const auto build = [mlp, state, weights](ParamBinder& bind) {
        Graph& g = bind.graph();
        Value y = mlp_forward(bind, "mlp", *mlp, bind("x", state->get("x")));
        return g.sum_all(g.mul(y, g.leaf(*weights)));
    };
    ParamRefs refs = state->refs();
    mlp->collect("mlp", refs);
    return finite_diff_check("mlp_forward", refs, build, fd, tol);
}

GradCheckReport check_cross_attention(double fd, double tol) {
    Rng rng(105);
    auto attn = std::make_shared<AttentionParams>(AttentionParams::create(8, 2, rng));
    auto state = std::make_shared<NamedTensors>();
    state->add("q", random_tensor({3, 8}, rng));
    state->add("kv", random_tensor({5, 8}, rng));
    const auto build = [attn, state](ParamBinder& bind) {
        AttentionOut out =
            cross_attention(bind, "attn", *attn, bind("q", state->get("q")), bind("kv", state->get("kv")));
        return bind.graph().sum_all(out.context);
    };
    ParamRefs refs = state->refs();
    attn->collect("attn", refs);
    return finite_diff_check("cross_attention", refs, build, fd, tol);
}

GradCheckReport check_gated_fuse(double fd, double tol, const NumericsConfig& cfg) {
    Rng rng(106);
    auto gate = std::make_shared<GateParams>(GateParams::create(4, rng));
    auto state = std::make_shared<NamedTensors>();
    state->add("v", random_tensor({3, 4}, rng));
    state->add("g", random_tensor({3, 4}, rng));
    auto weights = std::make_shared<Tensor>(random_tensor({3, 4}, rng));
    const auto build = [gate, state, weights, cfg](ParamBinder& bind) {
        Graph& g = bind.graph();
        Value v_n = g.layer_norm(bind("v", state->get("v")), bind("gate.ln_v_gain", gate->ln_v_gain),
                                 bind("gate.ln_v_bias", gate->ln_v_bias), cfg.ln_epsilon);
        Value g_n = g.layer_norm(bind("g", state->get("g")), bind("gate.ln_g_gain", gate->ln_g_gain),
                                 bind("gate.ln_g_bias", gate->ln_g_bias), cfg.ln_epsilon);
        const Value cat[] = {v_n, g_n};
        Value alpha = g.sigmoid(
            g.add_rowvec(g.matmul(g.concat_cols(cat), bind("gate.w_g", gate->w_g)), bind("gate.b_g", gate->b_g)));
        Value fused = g.add(g_n, g.mul(alpha, g.sub(v_n, g_n)));
        return g.sum_all(g.mul(fused, g.leaf(*weights)));
    };
    ParamRefs refs = state->refs();
    gate->collect("gate", refs);
    return finite_diff_check("gated_fuse", refs, build, fd, tol);
}

GradCheckReport check_additive_fuse(double fd, double tol) {
    Rng rng(107);
    auto fusion = std::make_shared<FusionParams>();
    {
        Rng r(108);
        fusion->additive = AdditiveParams{MlpParams::create_linear(5, 6, r)};
    }
    auto vision = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({4, 6}, rng), GridShape{2, 2, 1}, StreamTag::Vision});
    auto geometry = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({9, 5}, rng), GridShape{3, 3, 1}, StreamTag::Geometry});
    auto weights = std::make_shared<Tensor>(random_tensor({4, 6}, rng));
    const auto build = [fusion, vision, geometry, weights](ParamBinder& bind) {
        PipelineSpec spec{Family::Additive, Variant::E, MaskPlan{MaskMode::Disabled, 0.0, 0.0}};
        FuseInputs in{vision.get(), geometry.get(), nullptr};
        FusedResult out = fuse_variant(bind, *fusion, spec, in, nullptr);
        Graph& g = bind.graph();
        return g.sum_all(g.mul(out.fused, g.leaf(*weights)));
    };
    ParamRefs refs;
    fusion->collect(refs);
    return finite_diff_check("additive_fuse", refs, build, fd, tol);
}

GradCheckReport check_static_pipeline(double fd, double tol, const NumericsConfig& cfg) {
    auto fusion = std::make_shared<FusionParams>(
        FusionParams::create(Family::Additive, Variant::A, FusionDims{6, 4, 2, 2}, 109));
    Rng rng(110);
    auto vision = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({8, 6}, rng), GridShape{2, 2, 2}, StreamTag::Vision});
    auto geometry = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({8, 4}, rng), GridShape{2, 2, 2}, StreamTag::Geometry});
    auto weights = std::make_shared<Tensor>(random_tensor({8, 6}, rng));
    MaskOutcome forced;
    forced.enabled = true;
    forced.mask_set = {0, 3, 5};
    forced.m.assign(8, 1);
    for (int j : forced.mask_set) forced.m[static_cast<size_t>(j)] = 0;
    const auto build = [fusion, vision, geometry, weights, forced, cfg](ParamBinder& bind) {
        PipelineSpec spec{Family::Additive, Variant::A, MaskPlan{MaskMode::Random, 0.4, 1.0}};
        FuseInputs in{vision.get(), geometry.get(), nullptr};
        FusedResult out = fuse_variant(bind, *fusion, spec, in, nullptr, forced, cfg);
        Graph& g = bind.graph();
        return g.sum_all(g.mul(out.fused, g.leaf(*weights)));
    };
    ParamRefs refs;
    fusion->collect(refs);
    return finite_diff_check("static_pipeline", refs, build, fd, tol);
}

struct DynamicMicro {
    std::shared_ptr<FusionParams> fusion;
    std::shared_ptr<TokenSequence> vision, geometry, prompt;
    MaskOutcome forced;
};

DynamicMicro dynamic_micro(const NumericsConfig& cfg) {
    DynamicMicro m;
    m.fusion = std::make_shared<FusionParams>(
        FusionParams::create(Family::QFormer, Variant::A, FusionDims{8, 5, 2, 2}, 111));
    Rng rng(112);
    m.vision = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({8, 8}, rng), GridShape{2, 2, 2}, StreamTag::Vision});
    m.geometry = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({18, 5}, rng), GridShape{3, 3, 2}, StreamTag::Geometry});
    m.prompt = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({3, 8}, rng), std::nullopt, StreamTag::Prompt});
    // freeze the TopK selection at the unperturbed parameters so the finite
    // differences see the same mask the analytic pass saw
    {
        Graph g;
        ParamBinder bind(g);
        PipelineSpec spec{Family::QFormer, Variant::A, MaskPlan{MaskMode::Disabled, 0.5, 1.0}};
        FuseInputs in{m.vision.get(), m.geometry.get(), m.prompt.get()};
        FusedResult probe = fuse_variant(bind, *m.fusion, spec, in, nullptr, {}, cfg);
        m.forced.enabled = true;
        m.forced.mask_set = topk_mask_set(*probe.relevance, 0.5);
        m.forced.m.assign(8, 1);
        for (int j : m.forced.mask_set) m.forced.m[static_cast<size_t>(j)] = 0;
    }
    return m;
}

GradCheckReport check_dynamic_pipeline(double fd, double tol, const NumericsConfig& cfg) {
    DynamicMicro m = dynamic_micro(cfg);
    Rng rng(113);
    auto w_fused = std::make_shared<Tensor>(random_tensor({8, 8}, rng));
    auto w_append = std::make_shared<Tensor>(random_tensor({2, 8}, rng));
    const auto build = [m, w_fused, w_append, cfg](ParamBinder& bind) {
        PipelineSpec spec{Family::QFormer, Variant::A, MaskPlan{MaskMode::RelevanceTopK, 0.5, 1.0}};
        FuseInputs in{m.vision.get(), m.geometry.get(), m.prompt.get()};
        FusedResult out = fuse_variant(bind, *m.fusion, spec, in, nullptr, m.forced, cfg);
        Graph& g = bind.graph();
        Value a = g.sum_all(g.mul(out.fused, g.leaf(*w_fused)));
        Value b = g.sum_all(g.mul(*out.appended, g.leaf(*w_append)));
        return g.add(a, b);
    };
    ParamRefs refs;
    m.fusion->collect(refs);
    return finite_diff_check("dynamic_pipeline", refs, build, fd, tol);
}

GradCheckReport check_backbone_loss(double fd, double tol, const NumericsConfig& cfg) {
    auto backbone = std::make_shared<BackboneParams>(BackboneParams::create(8, 2, 1, 114));
    Rng rng(115);
    backbone->head_w = random_tensor({8, 2}, rng, 0.3);  // zero head would hide upstream gradients
    auto vision = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({4, 8}, rng), GridShape{2, 2, 1}, StreamTag::Vision});
    auto prompt = std::make_shared<TokenSequence>(
        TokenSequence{random_tensor({2, 8}, rng), std::nullopt, StreamTag::Prompt});
    const auto build = [backbone, vision, prompt, cfg](ParamBinder& bind) {
        Graph& g = bind.graph();
        FusedResult fr;
        fr.fused = g.leaf(vision->tokens);
        fr.fused_grid = vision->grid;
        Value logits = backbone_forward(bind, *backbone, fr, *prompt, cfg);
        return g.cross_entropy_logits(logits, 1);
    };
    ParamRefs refs;
    backbone->collect("backbone", refs);
    return finite_diff_check("backbone_loss", refs, build, fd, tol);
}

GradCheckReport check_full_dynamic_model(double fd, double tol, const NumericsConfig& cfg) {
    auto model = std::make_shared<ModelParams>();
    const FusionDims dims{8, 5, 2, 2};
    model->fusion = FusionParams::create(Family::QFormer, Variant::A, dims, 116);
    model->backbone = BackboneParams::create(8, 2, 1, 116);
    Rng rng(117);
    model->backbone.head_w = random_tensor({8, 2}, rng, 0.3);
    auto sample = std::make_shared<Sample>();
    sample->vision = TokenSequence{random_tensor({8, 8}, rng), GridShape{2, 2, 2}, StreamTag::Vision};
    sample->geometry = TokenSequence{random_tensor({18, 5}, rng), GridShape{3, 3, 2}, StreamTag::Geometry};
    sample->prompt = TokenSequence{random_tensor({3, 8}, rng), std::nullopt, StreamTag::Prompt};
    sample->label = 1;
    MaskOutcome forced;
    {
        Graph g;
        ParamBinder bind(g);
        PipelineSpec spec{Family::QFormer, Variant::A, MaskPlan{MaskMode::Disabled, 0.5, 1.0}};
        FuseInputs in{&sample->vision, &sample->geometry, &sample->prompt};
        FusedResult probe = fuse_variant(bind, model->fusion, spec, in, nullptr, {}, cfg);
        forced.enabled = true;
        forced.mask_set = topk_mask_set(*probe.relevance, 0.5);
        forced.m.assign(8, 1);
        for (int j : forced.mask_set) forced.m[static_cast<size_t>(j)] = 0;
    }
    const auto build = [model, sample, forced](ParamBinder& bind) {
        PipelineSpec spec{Family::QFormer, Variant::A, MaskPlan{MaskMode::RelevanceTopK, 0.5, 1.0}};
        return sample_loss(bind, *model, spec, *sample, nullptr, forced);
    };
    ParamRefs refs = model->refs();
    return finite_diff_check("full_dynamic_model", refs, build, fd, tol);
}

}  // namespace

std::vector<GradCheckReport> gradcheck_suite(double tol, const NumericsConfig& cfg) {
    const double fd = cfg.fd_step;
    std::vector<GradCheckReport> reports;
    reports.push_back(check_matmul(fd, tol));
    reports.push_back(check_softmax(fd, tol));
    reports.push_back(check_layer_norm(fd, tol, cfg));
    reports.push_back(check_mlp(fd, tol));
    reports.push_back(check_cross_attention(fd, tol));
    reports.push_back(check_gated_fuse(fd, tol, cfg));
    reports.push_back(check_additive_fuse(fd, tol));
    reports.push_back(check_static_pipeline(fd, tol, cfg));
    reports.push_back(check_dynamic_pipeline(fd, tol, cfg));
    reports.push_back(check_backbone_loss(fd, tol, cfg));
    reports.push_back(check_full_dynamic_model(fd, tol, cfg));
    return reports;
}

}  // namespace geofuse
