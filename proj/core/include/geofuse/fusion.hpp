#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "geofuse/attention.hpp"
#include "geofuse/masking.hpp"
#include "geofuse/params.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

enum class StreamTag { Vision, Geometry, Prompt, Bottleneck, Fused };

struct GridShape {
    int h = 0, w = 0, t = 0;
    int cells() const { return h * w * t; }
    bool operator==(const GridShape&) const = default;
};

/// A length x channels token matrix, optionally tied to a (H, W, T) grid.
struct TokenSequence {
    Tensor tokens;
    std::optional<GridShape> grid;
    StreamTag tag = StreamTag::Vision;

    int length() const { return tokens.rows(); }
    int width() const { return tokens.cols(); }
    void validate() const;
};

/// Learnable bottleneck query tokens plus their prompt cross-attention.
struct BottleneckParams {
    Tensor tokens;  // L_B x C
    AttentionParams attn1;

    static BottleneckParams create(int l_b, int channels, int heads, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

/// Token-and-channel gate: alpha = sigmoid(W_g [V || G] + b_g) over the
/// layer-normed streams.
struct GateParams {
    Tensor w_g;  // 2C x C
    Tensor b_g;  // {C}
    Tensor ln_v_gain, ln_v_bias;  // {C}
    Tensor ln_g_gain, ln_g_bias;  // {C}

    static GateParams create(int channels, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct GateTensor {
    Tensor alpha;     // N x C, entries in (0,1)
    Tensor v_normed;  // N x C
    Tensor g_normed;  // N x C
};

/// Eq-level parameter bundles. Only the pieces a wiring actually uses are
/// created, so the trainable set matches the configured variant.
struct AdditiveParams {
    MlpParams proj;  // C_G -> C, single linear
};

struct StaticGeoParams {
    MlpParams geo_proj;  // C_G -> C, single linear, applied after resampling
    GateParams gate;
};

struct QFormerParams {
    BottleneckParams bottleneck;
    MlpParams geo_proj;                     // C_G -> C
    std::optional<MlpParams> align_mlp;     // C -> C, after spatial resample
    AttentionParams attn2;
    std::optional<AttentionParams> attn3;   // geometry retrieval
    std::optional<MlpParams> zg_proj;       // appended-evidence projection (baseline concat)
    std::optional<GateParams> gate;
};

enum class Family { Additive, QFormer };
enum class Variant { A, B, C, D, E, F };

std::string to_string(Family f);
std::string to_string(Variant v);
Family family_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

/// Which modules a variant wires in: mask / gated fusion / baseline fusion.
bool variant_uses_mask(Variant v);
bool variant_uses_gate(Variant v);
bool variant_uses_geometry(Variant v);

struct FusionDims {
    int c = 32;
    int c_g = 6;
    int heads = 4;
    int l_b = 8;
    int hidden() const { return 2 * c; }
};

struct FusionParams {
    std::optional<AdditiveParams> additive;
    std::optional<StaticGeoParams> static_geo;
    std::optional<QFormerParams> qformer;

    static FusionParams create(Family family, Variant variant, const FusionDims& dims, uint64_t seed);
    void collect(ParamRefs& out);
};

struct PipelineSpec {
    Family family = Family::Additive;
    Variant variant = Variant::A;
    MaskPlan mask;

    /// The plan actually applied: Disabled unless the variant masks.
    MaskPlan effective_mask() const;
    void validate() const;
};

/// Graph-level fusion output. fused (and appended, when present) stay
/// differentiable; the rest are detached diagnostics.
struct FusedResult {
    Value fused;
    std::optional<Value> appended;           // evidence block appended downstream, L_B x C
    std::optional<Value> evidence;           // compact geometry evidence Z_G
    std::optional<GridShape> fused_grid;
    std::optional<GateTensor> gate;
    std::optional<RelevanceScore> relevance;
    std::optional<Tensor> attn_probs;        // evidence-query attention snapshot
    MaskOutcome mask;
    Tensor masked_vision;                    // vision stream entering fusion
};

/// Data-level fusion output mirroring FusedResult.
struct FusedSequence {
    TokenSequence fused;
    std::optional<TokenSequence> appended_global;
    std::optional<GateTensor> gate;
    std::optional<RelevanceScore> relevance;
    std::optional<AttentionRecord> attention;
    MaskOutcome mask;
};

struct FuseInputs {
    const TokenSequence* vision = nullptr;
    const TokenSequence* geometry = nullptr;
    const TokenSequence* prompt = nullptr;  // required by the QFormer family
};

/// Runs one variant's wiring inside the caller's graph. mask_rng drives the
/// enable and position draws; forced_mask (when set) bypasses them, which
/// keeps finite-difference checks off the discrete selection path.
FusedResult fuse_variant(ParamBinder& bind, const FusionParams& params, const PipelineSpec& spec,
                         const FuseInputs& in, Rng* mask_rng, const std::optional<MaskOutcome>& forced_mask = {},
                         const NumericsConfig& cfg = {});

FusedSequence materialize(const FusedResult& r);

// Pure bilinear grid resample (align-corners), identity when grids match.
Value bilinear_to(Graph& g, Value x, const GridShape& src, int dst_h, int dst_w);
TokenSequence interp_align(const TokenSequence& f_g, int dst_h, int dst_w);

// Forward-only views of the individual fusion operations.
FusedSequence additive_fuse(const TokenSequence& f_v, const TokenSequence& f_g, const MlpParams& proj);
TokenSequence bottleneck_summarize(const BottleneckParams& params, const TokenSequence& f_p);
std::pair<TokenSequence, AttentionRecord> geometry_query(const TokenSequence& f_b, const TokenSequence& f_g_aligned,
                                                         const AttentionParams& attn2);
FusedSequence qformer_concat_fuse(const TokenSequence& f_v, const TokenSequence& z_g, const MlpParams& proj);
TokenSequence retrieve_geo_features(const TokenSequence& f_g_prime, const TokenSequence& z_g,
                                    const AttentionParams& attn3);
std::pair<FusedSequence, GateTensor> gated_fuse(const TokenSequence& f_v_masked, const TokenSequence& f_g_tilde,
                                                const GateParams& params, const NumericsConfig& cfg = {});
FusedSequence static_pipeline(const TokenSequence& f_v, const TokenSequence& f_g, const MaskPlan& mask,
                              const StaticGeoParams& params, Rng& rng, const NumericsConfig& cfg = {});
FusedSequence dynamic_pipeline(const TokenSequence& f_v, const TokenSequence& f_g, const TokenSequence& f_p,
                               const MaskPlan& mask, const QFormerParams& params, Rng& rng,
                               const NumericsConfig& cfg = {});

/// Per-token mean of the gate, one value per fused grid position.
std::vector<double> mean_gate(const GateTensor& gate);

/// Diagnostics CSV: columns (index,t,h,w,value), or (t,h,w,value) when
/// with_index is false. Values are printed with 17 significant digits.
void write_grid_csv(std::span<const double> values, const GridShape& grid, bool with_index, std::ostream& out);

}  // namespace geofuse
