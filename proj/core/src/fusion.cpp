#include "geofuse/fusion.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace geofuse {

void TokenSequence::validate() const {
    if (tokens.rank() != 2) throw_contract_error("token sequence must be rank-2, got " + shape_str(tokens.shape()));
    if (grid && grid->cells() != length()) {
        throw_contract_error("token grid " + std::to_string(grid->h) + "x" + std::to_string(grid->w) + "x" +
                             std::to_string(grid->t) + " does not cover " + std::to_string(length()) + " tokens");
    }
}

BottleneckParams BottleneckParams::create(int l_b, int channels, int heads, Rng& rng) {
    if (l_b < 1) throw_contract_error("bottleneck length must be >= 1");
    BottleneckParams p;
    p.tokens = Tensor({l_b, channels});
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
    for (int i = 0; i < p.tokens.size(); ++i) p.tokens.at(i) = scale * rng.normal();
    p.attn1 = AttentionParams::create(channels, heads, rng);
    return p;
}

void BottleneckParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".tokens", &tokens);
    attn1.collect(prefix + ".attn1", out);
}

GateParams GateParams::create(int channels, Rng& rng) {
    GateParams p;
    p.w_g = init_weight(2 * channels, channels, rng);
    p.b_g = Tensor({channels});
    p.ln_v_gain = Tensor::ones({channels});
    p.ln_v_bias = Tensor({channels});
    p.ln_g_gain = Tensor::ones({channels});
    p.ln_g_bias = Tensor({channels});
    return p;
}

void GateParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w_g", &w_g);
    out.emplace_back(prefix + ".b_g", &b_g);
    out.emplace_back(prefix + ".ln_v_gain", &ln_v_gain);
    out.emplace_back(prefix + ".ln_v_bias", &ln_v_bias);
    out.emplace_back(prefix + ".ln_g_gain", &ln_g_gain);
    out.emplace_back(prefix + ".ln_g_bias", &ln_g_bias);
}

std::string to_string(Family f) { return f == Family::Additive ? "additive" : "qformer"; }

std::string to_string(Variant v) {
    switch (v) {
        case Variant::A: return "a";
        case Variant::B: return "b";
        case Variant::C: return "c";
        case Variant::D: return "d";
        case Variant::E: return "e";
        case Variant::F: return "f";
    }
    return "?";
}

Family family_from_string(const std::string& s) {
    if (s == "additive") return Family::Additive;
    if (s == "qformer") return Family::QFormer;
    throw_contract_error("unknown fusion family '" + s + "'");
}

Variant variant_from_string(const std::string& s) {
    if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'f') return static_cast<Variant>(s[0] - 'a');
    throw_contract_error("unknown variant '" + s + "', expected one of a..f");
}

bool variant_uses_mask(Variant v) { return v == Variant::A || v == Variant::B || v == Variant::C; }
bool variant_uses_gate(Variant v) { return v == Variant::A || v == Variant::D; }
bool variant_uses_geometry(Variant v) { return v != Variant::F; }

FusionParams FusionParams::create(Family family, Variant variant, const FusionDims& dims, uint64_t seed) {
    FusionParams p;
    if (!variant_uses_geometry(variant)) return p;
    const auto stream = [&](uint64_t id) { return Rng::keyed(seed, {kInitStream, id}); };
    if (family == Family::Additive) {
        if (variant_uses_gate(variant)) {
            StaticGeoParams sg;
            Rng r_proj = stream(2);
            sg.geo_proj = MlpParams::create_linear(dims.c_g, dims.c, r_proj);
            Rng r_gate = stream(3);
            sg.gate = GateParams::create(dims.c, r_gate);
            p.static_geo = std::move(sg);
        } else {
            Rng r = stream(1);
            p.additive = AdditiveParams{MlpParams::create_linear(dims.c_g, dims.c, r)};
        }
        return p;
    }
    QFormerParams qf;
    Rng r_b = stream(4);
    qf.bottleneck = BottleneckParams::create(dims.l_b, dims.c, dims.heads, r_b);
    Rng r_gp = stream(6);
    qf.geo_proj = MlpParams::create(dims.c_g, dims.hidden(), dims.c, r_gp);
    Rng r_a2 = stream(8);
    qf.attn2 = AttentionParams::create(dims.c, dims.heads, r_a2);
    if (variant != Variant::E) {
        Rng r_al = stream(7);
        qf.align_mlp = MlpParams::create(dims.c, dims.hidden(), dims.c, r_al);
    }
    if (variant_uses_gate(variant)) {
        Rng r_a3 = stream(9);
        qf.attn3 = AttentionParams::create(dims.c, dims.heads, r_a3);
        Rng r_gt = stream(11);
        qf.gate = GateParams::create(dims.c, r_gt);
    } else {
        Rng r_z = stream(10);
        qf.zg_proj = MlpParams::create(dims.c, dims.hidden(), dims.c, r_z);
    }
    p.qformer = std::move(qf);
    return p;
}

void FusionParams::collect(ParamRefs& out) {
    if (additive) additive->proj.collect("fusion.additive.proj", out);
    if (static_geo) {
        static_geo->geo_proj.collect("fusion.static.geo_proj", out);
        static_geo->gate.collect("fusion.static.gate", out);
    }
    if (qformer) {
        qformer->bottleneck.collect("fusion.qformer.bottleneck", out);
        qformer->geo_proj.collect("fusion.qformer.geo_proj", out);
        if (qformer->align_mlp) qformer->align_mlp->collect("fusion.qformer.align_mlp", out);
        qformer->attn2.collect("fusion.qformer.attn2", out);
        if (qformer->attn3) qformer->attn3->collect("fusion.qformer.attn3", out);
        if (qformer->zg_proj) qformer->zg_proj->collect("fusion.qformer.zg_proj", out);
        if (qformer->gate) qformer->gate->collect("fusion.qformer.gate", out);
    }
}

MaskPlan PipelineSpec::effective_mask() const {
    if (!variant_uses_mask(variant)) return MaskPlan{MaskMode::Disabled, mask.gamma, mask.beta};
    return mask;
}

void PipelineSpec::validate() const {
    mask.validate();
    if (family == Family::Additive && mask.mode == MaskMode::RelevanceTopK && variant_uses_mask(variant)) {
        throw_contract_error("RelevanceTopK masking needs the qformer family; the additive family has no "
                             "evidence query to score");
    }
}

Value bilinear_to(Graph& g, Value x, const GridShape& src, int dst_h, int dst_w) {
    if (src.h == dst_h && src.w == dst_w) return x;
    return g.interp2d(x, src.t, src.h, src.w, dst_h, dst_w);
}

TokenSequence interp_align(const TokenSequence& f_g, int dst_h, int dst_w) {
    f_g.validate();
    if (!f_g.grid) throw_contract_error("interp_align: source sequence has no grid");
    if (f_g.grid->h == dst_h && f_g.grid->w == dst_w) return f_g;
    Graph g;
    Value out = g.interp2d(g.leaf(f_g.tokens), f_g.grid->t, f_g.grid->h, f_g.grid->w, dst_h, dst_w);
    return {out.tensor(), GridShape{dst_h, dst_w, f_g.grid->t}, f_g.tag};
}

namespace {

struct GateOut {
    Value fused;
    GateTensor snap;
};

GateOut gate_mix(ParamBinder& bind, const std::string& path, const GateParams& p, Value v_stream, Value g_stream,
                 const NumericsConfig& cfg) {
    Graph& g = bind.graph();
    Value v_n = g.layer_norm(v_stream, bind(path + ".ln_v_gain", p.ln_v_gain), bind(path + ".ln_v_bias", p.ln_v_bias),
                             cfg.ln_epsilon);
    Value g_n = g.layer_norm(g_stream, bind(path + ".ln_g_gain", p.ln_g_gain), bind(path + ".ln_g_bias", p.ln_g_bias),
                             cfg.ln_epsilon);
    const Value cat_in[] = {v_n, g_n};
    Value alpha = g.sigmoid(g.add_rowvec(g.matmul(g.concat_cols(cat_in), bind(path + ".w_g", p.w_g)),
                                         bind(path + ".b_g", p.b_g)));
    // alpha*V + (1-alpha)*G, computed as G + alpha*(V-G) so equal streams
    // pass through exactly
    Value fused = g.add(g_n, g.mul(alpha, g.sub(v_n, g_n)));
    return {fused, GateTensor{alpha.tensor(), v_n.tensor(), g_n.tensor()}};
}

MaskOutcome draw_mask(const MaskPlan& plan, int n_tokens, const std::optional<RelevanceScore>& scores, Rng* rng,
                      const std::optional<MaskOutcome>& forced) {
    if (forced) return *forced;
    if (plan.mode == MaskMode::Disabled) return MaskOutcome::identity(n_tokens);
    if (!rng) throw_contract_error("masking enabled but no rng stream supplied");
    return plan_outcome(plan, n_tokens, scores, *rng);
}

Value masked_value(Graph& g, Value f_v, const MaskOutcome& mo) {
    if (mo.mask_set.empty()) return f_v;
    return g.zero_rows(f_v, mo.mask_set);
}

FusedResult additive_family(ParamBinder& bind, const FusionParams& params, const PipelineSpec& spec,
                            const FuseInputs& in, Rng* mask_rng, const std::optional<MaskOutcome>& forced,
                            const NumericsConfig& cfg) {
    Graph& g = bind.graph();
    const GridShape vg = *in.vision->grid;
    const GridShape gg = *in.geometry->grid;
    if (gg.t != vg.t) {
        throw_contract_error("frame-count mismatch: geometry has " + std::to_string(gg.t) + " frames, vision has " +
                             std::to_string(vg.t));
    }
    FusedResult out;
    const int n = in.vision->length();
    out.mask = draw_mask(spec.effective_mask(), n, {}, mask_rng, forced);

    Value f_v = g.leaf(in.vision->tokens);
    Value f_v_m = masked_value(g, f_v, out.mask);
    out.masked_vision = f_v_m.tensor();
    Value geo = g.leaf(in.geometry->tokens);
    Value geo_resampled = bilinear_to(g, geo, gg, vg.h, vg.w);

    if (variant_uses_gate(spec.variant)) {
        const StaticGeoParams& sg = *params.static_geo;
        Value g_tilde = mlp_forward(bind, "fusion.static.geo_proj", sg.geo_proj, geo_resampled);
        GateOut mix = gate_mix(bind, "fusion.static.gate", sg.gate, f_v_m, g_tilde, cfg);
        out.fused = mix.fused;
        out.gate = std::move(mix.snap);
    } else {
        Value proj = mlp_forward(bind, "fusion.additive.proj", params.additive->proj, geo_resampled);
        out.fused = g.add(f_v_m, proj);
    }
    out.fused_grid = vg;
    return out;
}

FusedResult qformer_family(ParamBinder& bind, const FusionParams& params, const PipelineSpec& spec,
                           const FuseInputs& in, Rng* mask_rng, const std::optional<MaskOutcome>& forced,
                           const NumericsConfig& cfg) {
    Graph& g = bind.graph();
    if (!in.prompt) throw_contract_error("qformer family needs prompt tokens");
    const GridShape vg = *in.vision->grid;
    const GridShape gg = *in.geometry->grid;
    if (gg.t != vg.t) {
        throw_contract_error("frame-count mismatch: geometry has " + std::to_string(gg.t) + " frames, vision has " +
                             std::to_string(vg.t));
    }
    const QFormerParams& qf = *params.qformer;
    FusedResult out;
    const int n = in.vision->length();

    Value f_p = g.leaf(in.prompt->tokens);
    Value b_tokens = bind("fusion.qformer.bottleneck.tokens", qf.bottleneck.tokens);
    AttentionOut summary = cross_attention(bind, "fusion.qformer.bottleneck.attn1", qf.bottleneck.attn1, b_tokens, f_p);

    Value geo = g.leaf(in.geometry->tokens);
    Value f_hat = mlp_forward(bind, "fusion.qformer.geo_proj", qf.geo_proj, geo);
    Value keys = f_hat;
    bool keys_on_vision_grid = false;
    if (spec.variant != Variant::E) {
        keys = mlp_forward(bind, "fusion.qformer.align_mlp", *qf.align_mlp, bilinear_to(g, f_hat, gg, vg.h, vg.w));
        keys_on_vision_grid = true;
    }

    AttentionOut evidence = cross_attention(bind, "fusion.qformer.attn2", qf.attn2, summary.context, keys);
    Value z_g = evidence.context;
    out.evidence = z_g;
    out.attn_probs = evidence.probs;

    std::optional<RelevanceScore> scores;
    if (keys_on_vision_grid) scores = relevance_scores(*out.attn_probs, cfg);
    out.relevance = scores;

    const MaskPlan plan = spec.effective_mask();
    out.mask = draw_mask(plan, n, scores, mask_rng, forced);
    Value f_v = g.leaf(in.vision->tokens);
    Value f_v_m = masked_value(g, f_v, out.mask);
    out.masked_vision = f_v_m.tensor();

    if (variant_uses_gate(spec.variant)) {
        AttentionOut retrieved = cross_attention(bind, "fusion.qformer.attn3", *qf.attn3, keys, z_g);
        GateOut mix = gate_mix(bind, "fusion.qformer.gate", *qf.gate, f_v_m, retrieved.context, cfg);
        out.fused = mix.fused;
        out.gate = std::move(mix.snap);
        out.fused_grid = vg;
        out.appended = z_g;
    } else {
        Value zp = mlp_forward(bind, "fusion.qformer.zg_proj", *qf.zg_proj, z_g);
        const Value parts[] = {f_v_m, zp};
        out.fused = g.concat_rows(parts);
        // concatenated sequence no longer covers a grid
    }
    return out;
}

}  // namespace

FusedResult fuse_variant(ParamBinder& bind, const FusionParams& params, const PipelineSpec& spec,
                         const FuseInputs& in, Rng* mask_rng, const std::optional<MaskOutcome>& forced_mask,
                         const NumericsConfig& cfg) {
    spec.validate();
    in.vision->validate();
    if (!in.vision->grid) throw_contract_error("fuse_variant: vision sequence needs a grid");
    if (spec.variant == Variant::F) {
        Graph& g = bind.graph();
        FusedResult out;
        out.fused = g.leaf(in.vision->tokens);
        out.fused_grid = *in.vision->grid;
        out.mask = MaskOutcome::identity(in.vision->length());
        out.masked_vision = in.vision->tokens;
        return out;
    }
    if (!in.geometry) throw_contract_error("fuse_variant: geometry sequence required for variant " +
                                           to_string(spec.variant));
    in.geometry->validate();
    if (!in.geometry->grid) throw_contract_error("fuse_variant: geometry sequence needs a grid");
    if (spec.family == Family::Additive) {
        return additive_family(bind, params, spec, in, mask_rng, forced_mask, cfg);
    }
    return qformer_family(bind, params, spec, in, mask_rng, forced_mask, cfg);
}

FusedSequence materialize(const FusedResult& r) {
    FusedSequence s;
    s.fused = TokenSequence{r.fused.tensor(), r.fused_grid, StreamTag::Fused};
    if (r.appended) {
        s.appended_global = TokenSequence{r.appended->tensor(), std::nullopt, StreamTag::Bottleneck};
    }
    s.gate = r.gate;
    s.relevance = r.relevance;
    if (r.attn_probs) s.attention = AttentionRecord{*r.attn_probs, r.evidence->tensor()};
    s.mask = r.mask;
    return s;
}

FusedSequence additive_fuse(const TokenSequence& f_v, const TokenSequence& f_g, const MlpParams& proj) {
    f_v.validate();
    f_g.validate();
    if (!f_v.grid || !f_g.grid) throw_contract_error("additive_fuse: both sequences need grids");
    FusionParams params;
    params.additive = AdditiveParams{proj};
    PipelineSpec spec{Family::Additive, Variant::E, MaskPlan{MaskMode::Disabled, 0.0, 0.0}};
    Graph g;
    ParamBinder bind(g);
    FuseInputs in{&f_v, &f_g, nullptr};
    return materialize(fuse_variant(bind, params, spec, in, nullptr));
}

TokenSequence bottleneck_summarize(const BottleneckParams& params, const TokenSequence& f_p) {
    f_p.validate();
    AttentionRecord rec = cross_attention(params.attn1, params.tokens, f_p.tokens);
    return {std::move(rec.context), std::nullopt, StreamTag::Bottleneck};
}

std::pair<TokenSequence, AttentionRecord> geometry_query(const TokenSequence& f_b, const TokenSequence& f_g_aligned,
                                                         const AttentionParams& attn2) {
    AttentionRecord rec = cross_attention(attn2, f_b.tokens, f_g_aligned.tokens);
    TokenSequence z{rec.context, std::nullopt, StreamTag::Bottleneck};
    return {std::move(z), std::move(rec)};
}

FusedSequence qformer_concat_fuse(const TokenSequence& f_v, const TokenSequence& z_g, const MlpParams& proj) {
    f_v.validate();
    Graph g;
    ParamBinder bind(g);
    Value zp = mlp_forward(bind, "proj", proj, g.leaf(z_g.tokens));
    const Value parts[] = {g.leaf(f_v.tokens), zp};
    Value fused = g.concat_rows(parts);
    FusedSequence out;
    out.fused = TokenSequence{fused.tensor(), std::nullopt, StreamTag::Fused};
    out.mask = MaskOutcome::identity(f_v.length());
    return out;
}

TokenSequence retrieve_geo_features(const TokenSequence& f_g_prime, const TokenSequence& z_g,
                                    const AttentionParams& attn3) {
    AttentionRecord rec = cross_attention(attn3, f_g_prime.tokens, z_g.tokens);
    return {std::move(rec.context), f_g_prime.grid, StreamTag::Geometry};
}

std::pair<FusedSequence, GateTensor> gated_fuse(const TokenSequence& f_v_masked, const TokenSequence& f_g_tilde,
                                                const GateParams& params, const NumericsConfig& cfg) {
    if (f_v_masked.length() != f_g_tilde.length() || f_v_masked.width() != f_g_tilde.width()) {
        throw_dim_error("gated_fuse", f_v_masked.tokens.shape(), f_g_tilde.tokens.shape());
    }
    Graph g;
    ParamBinder bind(g);
    GateOut mix = gate_mix(bind, "gate", params, g.leaf(f_v_masked.tokens), g.leaf(f_g_tilde.tokens), cfg);
    FusedSequence out;
    out.fused = TokenSequence{mix.fused.tensor(), f_v_masked.grid, StreamTag::Fused};
    out.gate = mix.snap;
    out.mask = MaskOutcome::identity(f_v_masked.length());
    return {std::move(out), std::move(mix.snap)};
}

FusedSequence static_pipeline(const TokenSequence& f_v, const TokenSequence& f_g, const MaskPlan& mask,
                              const StaticGeoParams& params, Rng& rng, const NumericsConfig& cfg) {
    FusionParams fp;
    fp.static_geo = params;
    PipelineSpec spec{Family::Additive, mask.mode == MaskMode::Disabled ? Variant::D : Variant::A, mask};
    Graph g;
    ParamBinder bind(g);
    FuseInputs in{&f_v, &f_g, nullptr};
    return materialize(fuse_variant(bind, fp, spec, in, &rng, {}, cfg));
}

FusedSequence dynamic_pipeline(const TokenSequence& f_v, const TokenSequence& f_g, const TokenSequence& f_p,
                               const MaskPlan& mask, const QFormerParams& params, Rng& rng,
                               const NumericsConfig& cfg) {
    FusionParams fp;
    fp.qformer = params;
    PipelineSpec spec{Family::QFormer, mask.mode == MaskMode::Disabled ? Variant::D : Variant::A, mask};
    Graph g;
    ParamBinder bind(g);
    FuseInputs in{&f_v, &f_g, &f_p};
    return materialize(fuse_variant(bind, fp, spec, in, &rng, {}, cfg));
}

std::vector<double> mean_gate(const GateTensor& gate) {
    const int n = gate.alpha.rows(), c = gate.alpha.cols();
    std::vector<double> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += gate.alpha.at2(i, j);
        out[static_cast<size_t>(i)] = s / c;
    }
    return out;
}

void write_grid_csv(std::span<const double> values, const GridShape& grid, bool with_index, std::ostream& out) {
    if (static_cast<int>(values.size()) != grid.cells()) {
        throw_contract_error("write_grid_csv: " + std::to_string(values.size()) + " values for a grid of " +
                             std::to_string(grid.cells()) + " cells");
    }
    out << (with_index ? "index,t,h,w,value\n" : "t,h,w,value\n");
    char buf[40];
    size_t idx = 0;
    for (int t = 0; t < grid.t; ++t) {
        for (int h = 0; h < grid.h; ++h) {
            for (int w = 0; w < grid.w; ++w, ++idx) {
                std::snprintf(buf, sizeof(buf), "%.17g", values[idx]);
                if (with_index) out << idx << ',';
                out << t << ',' << h << ',' << w << ',' << buf << '\n';
            }
        }
    }
}

}  // namespace geofuse
