#include "geofuse/backbone.hpp"

#include <cmath>

namespace geofuse {

EncoderLayerParams EncoderLayerParams::create(int channels, int heads, Rng& rng) {
    EncoderLayerParams p;
    p.ln1_gain = Tensor::ones({channels});
    p.ln1_bias = Tensor({channels});
    p.ln2_gain = Tensor::ones({channels});
    p.ln2_bias = Tensor({channels});
    p.attn = AttentionParams::create(channels, heads, rng);
    p.mlp = MlpParams::create(channels, 2 * channels, channels, rng);
    return p;
}

void EncoderLayerParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".ln1_gain", &ln1_gain);
    out.emplace_back(prefix + ".ln1_bias", &ln1_bias);
    out.emplace_back(prefix + ".ln2_gain", &ln2_gain);
    out.emplace_back(prefix + ".ln2_bias", &ln2_bias);
    attn.collect(prefix + ".attn", out);
    mlp.collect(prefix + ".mlp", out);
}

BackboneParams BackboneParams::create(int channels, int heads, int n_layers, uint64_t seed) {
    if (n_layers < 1) throw_contract_error("backbone needs at least one layer");
    BackboneParams p;
    Rng r_type = Rng::keyed(seed, {kInitStream, 120});
    const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
    for (Tensor& row : p.type_embed) {
        row = Tensor({channels});
        for (int i = 0; i < channels; ++i) row.at(i) = scale * r_type.normal();
    }
    for (int l = 0; l < n_layers; ++l) {
        Rng r_layer = Rng::keyed(seed, {kInitStream, 100 + static_cast<uint64_t>(l)});
        p.layers.push_back(EncoderLayerParams::create(channels, heads, r_layer));
    }
    // zero head: chance-level logits at step 0
    p.head_w = Tensor({channels, 2});
    p.head_b = Tensor({2});
    return p;
}

void BackboneParams::collect(const std::string& prefix, ParamRefs& out) {
    static const char* kTagNames[5] = {"vision", "geometry", "prompt", "bottleneck", "fused"};
    for (size_t i = 0; i < type_embed.size(); ++i) {
        out.emplace_back(prefix + ".type." + kTagNames[i], &type_embed[i]);
    }
    for (size_t l = 0; l < layers.size(); ++l) {
        layers[l].collect(prefix + ".layer" + std::to_string(l), out);
    }
    out.emplace_back(prefix + ".head_w", &head_w);
    out.emplace_back(prefix + ".head_b", &head_b);
}

namespace {

void sinusoid_into(double pos, double* dst, int width) {
    for (int k = 0; k < width; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / width);
        dst[k] = (k % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
}

}  // namespace

Tensor positional_encoding(int length, const std::optional<GridShape>& grid, int channels) {
    Tensor pe({length, channels});
    const int chunk = channels / 3;
    const int t_chunk = channels - 2 * chunk;
    if (grid) {
        int row = 0;
        for (int t = 0; t < grid->t; ++t) {
            for (int h = 0; h < grid->h; ++h) {
                for (int w = 0; w < grid->w; ++w, ++row) {
                    double* dst = pe.ptr() + static_cast<size_t>(row) * channels;
                    sinusoid_into(t, dst, t_chunk);
                    sinusoid_into(h, dst + t_chunk, chunk);
                    sinusoid_into(w, dst + t_chunk + chunk, chunk);
                }
            }
        }
    } else {
        for (int row = 0; row < length; ++row) {
            sinusoid_into(row, pe.ptr() + static_cast<size_t>(row) * channels, t_chunk);
        }
    }
    return pe;
}

namespace {

Value embed_segment(ParamBinder& bind, const BackboneParams& params, const std::string& prefix, Value tokens,
                    const std::optional<GridShape>& grid, StreamTag tag) {
    static const char* kTagNames[5] = {"vision", "geometry", "prompt", "bottleneck", "fused"};
    Graph& g = bind.graph();
    const Tensor& t = tokens.tensor();
    Value pos = g.leaf(positional_encoding(t.rows(), grid, t.cols()));
    Value typed = g.add_rowvec(g.add(tokens, pos),
                               bind(prefix + ".type." + kTagNames[static_cast<size_t>(tag)],
                                    params.type_embed[static_cast<size_t>(tag)]));
    return typed;
}

}  // namespace

Value backbone_forward(ParamBinder& bind, const BackboneParams& params, const FusedResult& fused,
                       const TokenSequence& prompt, const NumericsConfig& cfg) {
    Graph& g = bind.graph();
    const std::string prefix = "backbone";
    if (prompt.width() != params.channels()) {
        throw_dim_error("backbone_forward", prompt.tokens.shape(), params.head_w.shape());
    }
    if (fused.fused.tensor().cols() != params.channels()) {
        throw_dim_error("backbone_forward", fused.fused.tensor().shape(), params.head_w.shape());
    }

    std::vector<Value> segments;
    segments.push_back(embed_segment(bind, params, prefix, fused.fused, fused.fused_grid, StreamTag::Fused));
    if (fused.appended) {
        segments.push_back(embed_segment(bind, params, prefix, *fused.appended, std::nullopt, StreamTag::Bottleneck));
    }
    segments.push_back(embed_segment(bind, params, prefix, g.leaf(prompt.tokens), std::nullopt, StreamTag::Prompt));
    Value x = g.concat_rows(segments);

    for (size_t l = 0; l < params.layers.size(); ++l) {
        const EncoderLayerParams& layer = params.layers[l];
        const std::string lp = prefix + ".layer" + std::to_string(l);
        Value normed1 = g.layer_norm(x, bind(lp + ".ln1_gain", layer.ln1_gain), bind(lp + ".ln1_bias", layer.ln1_bias),
                                     cfg.ln_epsilon);
        AttentionOut attn = cross_attention(bind, lp + ".attn", layer.attn, normed1, normed1);
        x = g.add(x, attn.context);
        Value normed2 = g.layer_norm(x, bind(lp + ".ln2_gain", layer.ln2_gain), bind(lp + ".ln2_bias", layer.ln2_bias),
                                     cfg.ln_epsilon);
        x = g.add(x, mlp_forward(bind, lp + ".mlp", layer.mlp, normed2));
    }

    Value pooled = g.mean_rows(x);
    return g.add_rowvec(g.matmul(pooled, bind(prefix + ".head_w", params.head_w)),
                        bind(prefix + ".head_b", params.head_b));
}

Tensor backbone_logits(const BackboneParams& params, const FusedSequence& fused, const TokenSequence& prompt,
                       const NumericsConfig& cfg) {
    Graph g;
    ParamBinder bind(g);
    FusedResult fr;
    fr.fused = g.leaf(fused.fused.tokens);
    fr.fused_grid = fused.fused.grid;
    if (fused.appended_global) fr.appended = g.leaf(fused.appended_global->tokens);
    Value logits = backbone_forward(bind, params, fr, prompt, cfg);
    return logits.tensor();
}

}  // namespace geofuse
