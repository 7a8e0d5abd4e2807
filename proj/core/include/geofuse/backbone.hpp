#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "geofuse/attention.hpp"
#include "geofuse/fusion.hpp"

namespace geofuse {

/// Pre-norm encoder block: x += attn(ln1(x)); x += mlp(ln2(x)).
struct EncoderLayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor ln2_gain, ln2_bias;
    AttentionParams attn;
    MlpParams mlp;

    static EncoderLayerParams create(int channels, int heads, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

/// Toy encoder: sinusoidal (t,h,w) positions plus a learned per-stream type
/// embedding, n pre-norm blocks, mean-pool and a linear 2-way head.
struct BackboneParams {
    std::array<Tensor, 5> type_embed;  // one {C} row per StreamTag
    std::vector<EncoderLayerParams> layers;
    Tensor head_w;  // C x 2
    Tensor head_b;  // {2}

    static BackboneParams create(int channels, int heads, int n_layers, uint64_t seed);
    int channels() const { return head_w.rows(); }
    void collect(const std::string& prefix, ParamRefs& out);
};

/// Sinusoidal position code for a token run. Grid tokens split the channels
/// into (t, h, w) chunks; gridless tokens encode their flat index in the
/// t chunk.
Tensor positional_encoding(int length, const std::optional<GridShape>& grid, int channels);

/// Classifier logits for one fused sample. Concatenates the fused tokens,
/// the appended evidence block when present, and the prompt, then encodes
/// and pools.
Value backbone_forward(ParamBinder& bind, const BackboneParams& params, const FusedResult& fused,
                       const TokenSequence& prompt, const NumericsConfig& cfg = {});

/// Forward-only wrapper: logits as a plain tensor of shape {1, 2}.
Tensor backbone_logits(const BackboneParams& params, const FusedSequence& fused, const TokenSequence& prompt,
                       const NumericsConfig& cfg = {});

}  // namespace geofuse
