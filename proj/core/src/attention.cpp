#include "geofuse/attention.hpp"

#include <cmath>

namespace geofuse {

Tensor init_weight(int rows, int cols, Rng& rng) {
    Tensor w({rows, cols});
    const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (int i = 0; i < w.size(); ++i) w.at(i) = scale * rng.normal();
    return w;
}

AttentionParams AttentionParams::create(int channels, int heads, Rng& rng) {
    if (heads <= 0 || channels % heads != 0) {
        throw_contract_error("attention: channels " + std::to_string(channels) + " not divisible by heads " +
                             std::to_string(heads));
    }
    AttentionParams p;
    p.heads = heads;
    const int d = channels / heads;
    for (int h = 0; h < heads; ++h) {
        p.wq.push_back(init_weight(channels, d, rng));
        p.wk.push_back(init_weight(channels, d, rng));
        p.wv.push_back(init_weight(channels, d, rng));
    }
    p.wo = init_weight(channels, channels, rng);
    return p;
}

void AttentionParams::collect(const std::string& prefix, ParamRefs& out) {
    for (int h = 0; h < heads; ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h);
        out.emplace_back(hp + ".wq", &wq[static_cast<size_t>(h)]);
        out.emplace_back(hp + ".wk", &wk[static_cast<size_t>(h)]);
        out.emplace_back(hp + ".wv", &wv[static_cast<size_t>(h)]);
    }
    out.emplace_back(prefix + ".wo", &wo);
}

AttentionOut cross_attention(ParamBinder& bind, const std::string& path, const AttentionParams& params,
                             Value queries, Value keys_values) {
    Graph& g = bind.graph();
    const Tensor& q = queries.tensor();
    const Tensor& kv = keys_values.tensor();
    if (q.cols() != params.channels() || kv.cols() != params.channels()) {
        throw_dim_error("cross_attention", q.shape(), {kv.rows(), params.channels()});
    }
    const int lq = q.rows();
    const int lk = kv.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));

    Tensor probs({params.heads, lq, lk});
    std::vector<Value> head_ctx;
    head_ctx.reserve(static_cast<size_t>(params.heads));
    for (int h = 0; h < params.heads; ++h) {
        const std::string hp = path + ".h" + std::to_string(h);
        Value qh = g.matmul(queries, bind(hp + ".wq", params.wq[static_cast<size_t>(h)]));
        Value kh = g.matmul(keys_values, bind(hp + ".wk", params.wk[static_cast<size_t>(h)]));
        Value vh = g.matmul(keys_values, bind(hp + ".wv", params.wv[static_cast<size_t>(h)]));
        Value logits = g.scale(g.matmul(qh, g.transpose(kh)), scale);
        Value p = g.softmax(logits, 1);
        head_ctx.push_back(g.matmul(p, vh));
        const Tensor& pt = p.tensor();
        std::copy(pt.ptr(), pt.ptr() + pt.size(), probs.ptr() + static_cast<size_t>(h) * lq * lk);
    }
    Value ctx = g.matmul(g.concat_cols(head_ctx), bind(path + ".wo", params.wo));
    return {ctx, std::move(probs)};
}

AttentionRecord cross_attention(const AttentionParams& params, const Tensor& queries, const Tensor& keys_values) {
    Graph g;
    ParamBinder bind(g);
    Value q = g.leaf(queries);
    Value kv = g.leaf(keys_values);
    AttentionOut out = cross_attention(bind, "attn", params, q, kv);
    return {std::move(out.probs), out.context.tensor()};
}

MlpParams MlpParams::create(int in, int hidden, int out, Rng& rng) {
    if (hidden == 0) return create_linear(in, out, rng);
    MlpParams p;
    p.w1 = init_weight(in, hidden, rng);
    p.b1 = Tensor({hidden});
    p.w2 = init_weight(hidden, out, rng);
    p.b2 = Tensor({out});
    return p;
}

MlpParams MlpParams::create_linear(int in, int out, Rng& rng) {
    MlpParams p;
    p.single = true;
    p.w1 = init_weight(in, out, rng);
    p.b1 = Tensor({out});
    return p;
}

void MlpParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w1", &w1);
    out.emplace_back(prefix + ".b1", &b1);
    if (!single) {
        out.emplace_back(prefix + ".w2", &w2);
        out.emplace_back(prefix + ".b2", &b2);
    }
}

Value mlp_forward(ParamBinder& bind, const std::string& path, const MlpParams& params, Value x) {
    Graph& g = bind.graph();
    if (x.tensor().cols() != params.in_width()) {
        throw_dim_error("mlp_forward", x.tensor().shape(), params.w1.shape());
    }
    Value h = g.add_rowvec(g.matmul(x, bind(path + ".w1", params.w1)), bind(path + ".b1", params.b1));
    if (params.single) return h;
    h = g.gelu(h);
    return g.add_rowvec(g.matmul(h, bind(path + ".w2", params.w2)), bind(path + ".b2", params.b2));
}

Tensor mlp_forward(const MlpParams& params, const Tensor& x) {
    Graph g;
    ParamBinder bind(g);
    Value v = mlp_forward(bind, "mlp", params, g.leaf(x));
    return v.tensor();
}

}  // namespace geofuse
