#pragma once

#include <string>
#include <vector>

#include "geofuse/params.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

/// Multi-head projection weights. Each head owns C -> C/h query, key and
/// value maps; the concatenated heads go through one C -> C output map.
/// No biases, scale 1/sqrt(C/h).
struct AttentionParams {
    int heads = 0;
    std::vector<Tensor> wq, wk, wv;  // heads x (C x C/h)
    Tensor wo;                       // C x C

    static AttentionParams create(int channels, int heads, Rng& rng);
    int channels() const { return wo.rows(); }
    int head_dim() const { return channels() / heads; }

    void collect(const std::string& prefix, ParamRefs& out);
};

/// Attention probabilities and attended context for one cross-attention
/// call. probs has shape heads x L_q x L_k and every (head, query) row sums
/// to one; context is the output-projected L_q x C map.
struct AttentionRecord {
    Tensor probs;
    Tensor context;
};

/// Graph-level result: context stays differentiable, probs is a detached
/// snapshot for relevance scoring.
struct AttentionOut {
    Value context;
    Tensor probs;
};

AttentionOut cross_attention(ParamBinder& bind, const std::string& path, const AttentionParams& params,
                             Value queries, Value keys_values);

/// Forward-only convenience wrapper over a scratch graph.
AttentionRecord cross_attention(const AttentionParams& params, const Tensor& queries, const Tensor& keys_values);

/// Two-layer perceptron in -> hidden -> out with GELU between, or a single
/// linear map when hidden == 0. Applied tokenwise.
struct MlpParams {
    Tensor w1, b1;  // in x hidden, {hidden}
    Tensor w2, b2;  // hidden x out, {out}; single-layer keeps only w1/b1 as in x out, {out}
    bool single = false;

    static MlpParams create(int in, int hidden, int out, Rng& rng);
    static MlpParams create_linear(int in, int out, Rng& rng);
    int in_width() const { return w1.rows(); }
    int out_width() const { return single ? w1.cols() : w2.cols(); }

    void collect(const std::string& prefix, ParamRefs& out);
};

Value mlp_forward(ParamBinder& bind, const std::string& path, const MlpParams& params, Value x);
Tensor mlp_forward(const MlpParams& params, const Tensor& x);

/// Gaussian init with 1/sqrt(fan_in) scale.
Tensor init_weight(int rows, int cols, Rng& rng);

}  // namespace geofuse
