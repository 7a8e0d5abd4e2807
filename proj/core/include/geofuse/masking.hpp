#pragma once

#include <optional>
#include <string>
#include <vector>

#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

enum class MaskMode { Disabled, Random, RelevanceTopK };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& s);

/// Masking configuration: how positions are chosen, which fraction of
/// tokens is masked (gamma) and the per-sample enable probability (beta).
struct MaskPlan {
    MaskMode mode = MaskMode::Disabled;
    double gamma = 0.8;
    double beta = 0.5;

    void validate() const;
    bool operator==(const MaskPlan&) const = default;
};

/// One realized draw: the enable bit, the chosen position set (sorted
/// ascending) and the full binary vector m with m[j] == 0 at masked slots.
struct MaskOutcome {
    bool enabled = false;
    std::vector<int> mask_set;
    std::vector<uint8_t> m;

    int k() const { return static_cast<int>(mask_set.size()); }
    static MaskOutcome identity(int n_tokens);
    std::string to_json() const;
};

/// Min-max normalized mean attention mass per key position. s entries lie
/// in [0,1]; a constant pre-normalization vector u maps to all-zero s.
struct RelevanceScore {
    std::vector<double> s;
    std::vector<double> u;
};

/// Number of masked tokens for ratio gamma over n tokens: the ceiling of
/// gamma*n, treating products within 1e-9 of an integer as that integer.
int mask_count(double gamma, int n_tokens);

/// Bernoulli(beta) enable draw; consumes exactly one rng event.
bool sample_enable(double beta, Rng& rng);

/// Uniform sample without replacement of size ceil(gamma*n), sorted.
std::vector<int> random_mask_set(int n_tokens, double gamma, Rng& rng);

/// Mean attention probability per key across heads and queries, min-max
/// normalized with an epsilon guard. probs shape: heads x queries x keys.
RelevanceScore relevance_scores(const Tensor& probs, const NumericsConfig& cfg = {});

/// Positions of the K = ceil(gamma*N) largest scores; ties break toward the
/// lower index. Returned sorted ascending.
std::vector<int> topk_mask_set(const RelevanceScore& score, double gamma);

/// Assembles an outcome for a plan: draws the enable bit, then picks the
/// position set by mode. RelevanceTopK requires scores.
MaskOutcome plan_outcome(const MaskPlan& plan, int n_tokens, const std::optional<RelevanceScore>& scores, Rng& rng);

/// Zeroes the rows listed in the outcome; sequence length is preserved.
/// Identity (bitwise) when the outcome is disabled or empty.
Tensor apply_mask(const Tensor& tokens, const MaskOutcome& outcome);

}  // namespace geofuse
