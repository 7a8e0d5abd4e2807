#include "geofuse/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace geofuse {

std::string to_string(MaskMode mode) {
    switch (mode) {
        case MaskMode::Disabled: return "Disabled";
        case MaskMode::Random: return "Random";
        case MaskMode::RelevanceTopK: return "RelevanceTopK";
    }
    return "?";
}

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "Disabled") return MaskMode::Disabled;
    if (s == "Random") return MaskMode::Random;
    if (s == "RelevanceTopK") return MaskMode::RelevanceTopK;
    throw_contract_error("unknown mask mode '" + s + "'");
}

void MaskPlan::validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw_contract_error("mask.gamma must lie in [0,1], got " + std::to_string(gamma));
    if (beta < 0.0 || beta > 1.0) throw_contract_error("mask.beta must lie in [0,1], got " + std::to_string(beta));
}

MaskOutcome MaskOutcome::identity(int n_tokens) {
    MaskOutcome o;
    o.enabled = false;
    o.m.assign(static_cast<size_t>(n_tokens), 1);
    return o;
}

std::string MaskOutcome::to_json() const {
    nlohmann::json j;
    j["enabled"] = enabled;
    j["k"] = k();
    j["mask_set"] = mask_set;
    return j.dump();
}

int mask_count(double gamma, int n_tokens) {
    if (n_tokens < 1) throw_contract_error("mask_count: n_tokens must be >= 1");
    const int k = static_cast<int>(std::ceil(gamma * static_cast<double>(n_tokens) - 1e-9));
    return std::clamp(k, 0, n_tokens);
}

bool sample_enable(double beta, Rng& rng) {
    if (beta < 0.0 || beta > 1.0) throw_contract_error("sample_enable: beta must lie in [0,1]");
    return rng.uniform01() < beta;
}

std::vector<int> random_mask_set(int n_tokens, double gamma, Rng& rng) {
    const int k = mask_count(gamma, n_tokens);
    std::vector<int> pool(static_cast<size_t>(n_tokens));
    std::iota(pool.begin(), pool.end(), 0);
    // partial Fisher-Yates: first k entries become the sample
    for (int i = 0; i < k; ++i) {
        const int j = i + rng.below(n_tokens - i);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
}

RelevanceScore relevance_scores(const Tensor& probs, const NumericsConfig& cfg) {
    if (probs.rank() != 3) throw_contract_error("relevance_scores: probs must be rank-3, got " + shape_str(probs.shape()));
    const int heads = probs.extent(0);
    const int queries = probs.extent(1);
    const int keys = probs.extent(2);
    RelevanceScore score;
    score.u.assign(static_cast<size_t>(keys), 0.0);
    for (int j = 0; j < keys; ++j) {
        double acc = 0.0;
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < queries; ++i) {
                acc += probs.at((h * queries + i) * keys + j);
            }
        }
        score.u[static_cast<size_t>(j)] = acc / (static_cast<double>(heads) * queries);
    }
    const auto [lo_it, hi_it] = std::minmax_element(score.u.begin(), score.u.end());
    const double lo = *lo_it, hi = *hi_it;
    score.s.assign(static_cast<size_t>(keys), 0.0);
    const double denom = hi - lo + cfg.epsilon;
    for (int j = 0; j < keys; ++j) {
        score.s[static_cast<size_t>(j)] = (score.u[static_cast<size_t>(j)] - lo) / denom;
    }
    return score;
}

std::vector<int> topk_mask_set(const RelevanceScore& score, double gamma) {
    const int n = static_cast<int>(score.s.size());
    if (n == 0) throw_contract_error("topk_mask_set: empty score vector");
    const int k = mask_count(gamma, n);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return score.s[static_cast<size_t>(a)] > score.s[static_cast<size_t>(b)];
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

MaskOutcome plan_outcome(const MaskPlan& plan, int n_tokens, const std::optional<RelevanceScore>& scores, Rng& rng) {
    plan.validate();
    if (plan.mode == MaskMode::Disabled) return MaskOutcome::identity(n_tokens);
    MaskOutcome o;
    o.enabled = sample_enable(plan.beta, rng);
    o.m.assign(static_cast<size_t>(n_tokens), 1);
    if (!o.enabled) return o;
    if (plan.mode == MaskMode::Random) {
        o.mask_set = random_mask_set(n_tokens, plan.gamma, rng);
    } else {
        if (!scores) throw_contract_error("plan_outcome: RelevanceTopK mode needs relevance scores");
        if (static_cast<int>(scores->s.size()) != n_tokens) {
            throw_contract_error("plan_outcome: score length " + std::to_string(scores->s.size()) +
                                 " does not match token count " + std::to_string(n_tokens));
        }
        o.mask_set = topk_mask_set(*scores, plan.gamma);
    }
    for (int j : o.mask_set) o.m[static_cast<size_t>(j)] = 0;
    return o;
}

Tensor apply_mask(const Tensor& tokens, const MaskOutcome& outcome) {
    if (tokens.rank() != 2 || static_cast<int>(outcome.m.size()) != tokens.rows()) {
        throw_dim_error("apply_mask", tokens.shape(), {static_cast<int>(outcome.m.size())});
    }
    if (!outcome.enabled || outcome.mask_set.empty()) return tokens;
    Tensor out = tokens;
    const int c = out.cols();
    for (int r : outcome.mask_set) {
        double* row = out.ptr() + static_cast<size_t>(r) * c;
        std::fill(row, row + c, 0.0);
    }
    return out;
}

}  // namespace geofuse
