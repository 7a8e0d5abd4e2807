#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <numeric>
#include <set>

#include "doctest.h"

#include "geofuse/masking.hpp"

using namespace geofuse;

TEST_CASE("sample_enable degenerate probabilities") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) CHECK_FALSE(sample_enable(0.0, rng));
    for (int i = 0; i < 200; ++i) CHECK(sample_enable(1.0, rng));
    CHECK_THROWS_AS(sample_enable(1.5, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_enable(-0.1, rng), std::invalid_argument);
}

TEST_CASE("sample_enable consumes exactly one rng event") {
    Rng a(77), b(77);
    (void)sample_enable(0.3, a);
    (void)b.next_u64();
    CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("sample_enable empirical frequency") {
    Rng rng(2);
    int hits = 0;
    for (int i = 0; i < 10000; ++i) hits += sample_enable(0.5, rng) ? 1 : 0;
    CHECK(std::abs(hits / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("random_mask_set sizes and extremes") {
    Rng rng(3);
    CHECK(random_mask_set(10, 0.0, rng).empty());
    const std::vector<int> full = random_mask_set(7, 1.0, rng);
    CHECK(full == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
    const std::vector<int> m = random_mask_set(10, 0.8, rng);
    CHECK(m.size() == 8);
    CHECK(std::is_sorted(m.begin(), m.end()));
    CHECK(std::adjacent_find(m.begin(), m.end()) == m.end());
}

TEST_CASE("random_mask_set per-position frequency is the masking ratio") {
    Rng rng(4);
    std::vector<int> counts(10, 0);
    const int trials = 20000;
    for (int t = 0; t < trials; ++t) {
        for (int j : random_mask_set(10, 0.8, rng)) counts[static_cast<size_t>(j)]++;
    }
    for (int c : counts) CHECK(std::abs(static_cast<double>(c) / trials - 0.8) < 0.02);
}

TEST_CASE("mask cardinality is the exact ceiling over the full grid") {
    struct Ratio {
        double value;
        int num, den;
    };
    const Ratio ratios[] = {{0.0, 0, 1},  {0.25, 1, 4}, {0.4, 2, 5}, {0.5, 1, 2},
                            {0.6, 3, 5},  {0.8, 4, 5},  {1.0, 1, 1}};
    for (const Ratio& r : ratios) {
        for (int n = 1; n <= 64; ++n) {
            const int expected = (r.num * n + r.den - 1) / r.den;  // exact rational ceiling
            CHECK(mask_count(r.value, n) == expected);
        }
    }
}

TEST_CASE("relevance score closed forms") {
    NumericsConfig cfg;
    SUBCASE("two-point min-max") {
        Tensor probs({1, 1, 2}, {0.2, 0.8});
        RelevanceScore s = relevance_scores(probs, cfg);
        CHECK(s.u[0] == doctest::Approx(0.2));
        CHECK(s.u[1] == doctest::Approx(0.8));
        CHECK(s.s[0] == 0.0);
        CHECK(s.s[1] == doctest::Approx(0.6 / (0.6 + cfg.epsilon)).epsilon(1e-12));
        CHECK(s.s[1] < 1.0);
    }
    SUBCASE("uniform attention is all zeros") {
        Tensor probs({1, 1, 4}, {0.25, 0.25, 0.25, 0.25});
        RelevanceScore s = relevance_scores(probs, cfg);
        for (double v : s.s) CHECK(v == 0.0);
    }
    SUBCASE("head averaging cancels") {
        Tensor probs({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
        RelevanceScore s = relevance_scores(probs, cfg);
        CHECK(s.u[0] == doctest::Approx(0.5));
        CHECK(s.u[1] == doctest::Approx(0.5));
        CHECK(s.s[0] == 0.0);
        CHECK(s.s[1] == 0.0);
    }
}

TEST_CASE("relevance scores match the hand-rolled double loop") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 1 + rng.below(4);
        const int lb = 1 + rng.below(8);
        const int n = 1 + rng.below(32);
        Tensor probs({h, lb, n});
        for (int k = 0; k < h; ++k) {
            for (int i = 0; i < lb; ++i) {
                double row_sum = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double v = rng.uniform01() + 1e-3;
                    probs.at((k * lb + i) * n + j) = v;
                    row_sum += v;
                }
                for (int j = 0; j < n; ++j) probs.at((k * lb + i) * n + j) /= row_sum;
            }
        }
        RelevanceScore fast = relevance_scores(probs);
        for (int j = 0; j < n; ++j) {
            double u = 0.0;
            for (int k = 0; k < h; ++k) {
                for (int i = 0; i < lb; ++i) u += probs.at((k * lb + i) * n + j);
            }
            u /= static_cast<double>(h) * lb;
            CHECK(std::abs(u - fast.u[static_cast<size_t>(j)]) < 1e-12);
        }
        for (double v : fast.s) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("topk selection with stated tie rule") {
    RelevanceScore s1{{0.1, 0.9, 0.5}, {}};
    CHECK(topk_mask_set(s1, 0.6) == std::vector<int>{1, 2});
    RelevanceScore s2{{0.5, 0.5, 0.1}, {}};
    CHECK(topk_mask_set(s2, 1.0 / 3.0) == std::vector<int>{0});
    RelevanceScore s3{{0.3, 0.2, 0.9}, {}};
    CHECK(topk_mask_set(s3, 1.0) == std::vector<int>{0, 1, 2});
}

TEST_CASE("topk equals the stable descending sort oracle") {
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + rng.below(32);
        RelevanceScore s;
        s.s.resize(static_cast<size_t>(n));
        for (double& v : s.s) v = rng.below(8) / 8.0;  // coarse values force ties
        const double gamma = rng.uniform01();
        const int k = mask_count(gamma, n);

        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return s.s[static_cast<size_t>(a)] > s.s[static_cast<size_t>(b)]; });
        std::vector<int> expected(order.begin(), order.begin() + k);
        std::sort(expected.begin(), expected.end());
        CHECK(topk_mask_set(s, gamma) == expected);
    }
}

TEST_CASE("topk coverage is monotone in gamma") {
    Rng rng(7);
    const double ladder[] = {0.0, 0.25, 0.4, 0.5, 0.6, 0.8, 1.0};
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + rng.below(24);
        RelevanceScore s;
        s.s.resize(static_cast<size_t>(n));
        for (double& v : s.s) v = rng.uniform01();
        std::set<int> prev;
        for (double gamma : ladder) {
            const std::vector<int> cur_v = topk_mask_set(s, gamma);
            const std::set<int> cur(cur_v.begin(), cur_v.end());
            CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
            prev = cur;
        }
    }
}

TEST_CASE("apply_mask identity, zeroing and idempotence") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    MaskOutcome disabled = MaskOutcome::identity(2);
    CHECK(apply_mask(x, disabled).bit_equal(x));

    MaskOutcome one;
    one.enabled = true;
    one.mask_set = {0};
    one.m = {0, 1};
    const Tensor masked = apply_mask(x, one);
    for (int j = 0; j < 3; ++j) CHECK(masked.at2(0, j) == 0.0);
    for (int j = 0; j < 3; ++j) CHECK(masked.at2(1, j) == x.at2(1, j));
    CHECK(apply_mask(masked, one).bit_equal(masked));

    MaskOutcome wrong;
    wrong.m = {1, 1, 1};
    CHECK_THROWS_AS(apply_mask(x, wrong), std::invalid_argument);
}

TEST_CASE("masked rows are all zero for every mask set member") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 2 + rng.below(20);
        Tensor x({n, 4});
        for (int i = 0; i < x.size(); ++i) x.at(i) = rng.normal() + 2.0;
        MaskPlan plan{MaskMode::Random, rng.uniform01(), 1.0};
        MaskOutcome o = plan_outcome(plan, n, {}, rng);
        const Tensor masked = apply_mask(x, o);
        int zero_rows = 0;
        for (int i = 0; i < n; ++i) {
            bool all_zero = true;
            for (int j = 0; j < 4; ++j) all_zero = all_zero && masked.at2(i, j) == 0.0;
            if (all_zero) ++zero_rows;
        }
        CHECK(zero_rows >= o.k());
        for (int j : o.mask_set) {
            for (int c = 0; c < 4; ++c) CHECK(masked.at2(j, c) == 0.0);
        }
        CHECK(o.k() == mask_count(plan.gamma, n));
    }
}

TEST_CASE("plan_outcome disabled and beta=0 give identity masking") {
    Rng rng(9);
    MaskOutcome off = plan_outcome(MaskPlan{MaskMode::Disabled, 0.8, 0.5}, 6, {}, rng);
    CHECK_FALSE(off.enabled);
    CHECK(off.mask_set.empty());
    CHECK(off.m == std::vector<uint8_t>(6, 1));

    for (int i = 0; i < 100; ++i) {
        MaskOutcome o = plan_outcome(MaskPlan{MaskMode::Random, 0.8, 0.0}, 6, {}, rng);
        CHECK_FALSE(o.enabled);
        CHECK(o.mask_set.empty());
        CHECK(o.m == std::vector<uint8_t>(6, 1));
    }
}

TEST_CASE("mask outcome serializes to the logging schema") {
    MaskOutcome o;
    o.enabled = true;
    o.mask_set = {0, 3};
    o.m = {0, 1, 1, 0, 1};
    CHECK(o.to_json() == R"({"enabled":true,"k":2,"mask_set":[0,3]})");
}
