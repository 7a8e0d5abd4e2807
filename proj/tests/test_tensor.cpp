#include <cmath>
#include <sstream>

#include "doctest.h"

#include "geofuse/graph.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

using namespace geofuse;

namespace {

Tensor rand_tensor(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t.at(i) = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("matmul identity and hand-computed product") {
    Graph g;
    Value eye = g.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
    Value b = g.leaf(Tensor({2, 2}, {5, 6, 7, 8}));
    CHECK(g.matmul(eye, b).tensor().bit_equal(b.tensor()));

    Value a = g.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    const Tensor& c = g.matmul(a, b).tensor();
    CHECK(c.at2(0, 0) == 19);
    CHECK(c.at2(0, 1) == 22);
    CHECK(c.at2(1, 0) == 43);
    CHECK(c.at2(1, 1) == 50);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Graph g;
    Value a = g.leaf(Tensor({2, 3}));
    Value b = g.leaf(Tensor({2, 2}));
    CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("softmax closed forms") {
    Graph g;
    const Tensor& uniform = g.softmax(g.leaf(Tensor({3}, {0, 0, 0})), 0).tensor();
    for (int i = 0; i < 3; ++i) CHECK(uniform.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const Tensor& two = g.softmax(g.leaf(Tensor({2}, {0.0, std::log(2.0)})), 0).tensor();
    CHECK(two.at(0) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(two.at(1) == doctest::Approx(2.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and row sums") {
    Graph g;
    Tensor x = rand_tensor({4, 7}, 42);
    Tensor shifted = x;
    for (int i = 0; i < shifted.rows(); ++i) {
        for (int j = 0; j < shifted.cols(); ++j) shifted.at2(i, j) += 123.456;
    }
    const Tensor& a = g.softmax(g.leaf(x), 1).tensor();
    const Tensor& b = g.softmax(g.leaf(shifted), 1).tensor();
    for (int i = 0; i < a.size(); ++i) {
        CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
        CHECK(a.at(i) > 0.0);
    }
    for (int i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < a.cols(); ++j) s += a.at2(i, j);
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("softmax axis validation") {
    Graph g;
    CHECK_THROWS_AS(g.softmax(g.leaf(Tensor({3})), 1), std::invalid_argument);
    CHECK_THROWS_AS(g.softmax(g.leaf(Tensor({2, 2})), 2), std::invalid_argument);
}

TEST_CASE("layer_norm closed forms") {
    Graph g;
    NumericsConfig cfg;
    Value gain = g.leaf(Tensor::ones({4}));
    Value bias = g.leaf(Tensor({4}));
    const Tensor& constant = g.layer_norm(g.leaf(Tensor({1, 4}, {5, 5, 5, 5})), gain, bias, cfg.ln_epsilon).tensor();
    for (int i = 0; i < 4; ++i) CHECK(std::abs(constant.at(i)) < std::sqrt(cfg.ln_epsilon));

    Value gain2 = g.leaf(Tensor::ones({2}));
    Value bias2 = g.leaf(Tensor({2}));
    const Tensor& pair = g.layer_norm(g.leaf(Tensor({1, 2}, {1, 3})), gain2, bias2, cfg.ln_epsilon).tensor();
    CHECK(std::abs(pair.at(0) + 1.0) < 1e-2);
    CHECK(std::abs(pair.at(1) - 1.0) < 1e-2);
}

TEST_CASE("layer_norm gradient vs central differences at 1e-5") {
    NumericsConfig cfg;
    Tensor x = rand_tensor({3, 5}, 7);
    Tensor gain = rand_tensor({5}, 8);
    Tensor bias = rand_tensor({5}, 9);
    Tensor w = rand_tensor({3, 5}, 10);

    const auto loss_of = [&]() {
        Graph g;
        Value y = g.layer_norm(g.leaf(x), g.leaf(gain), g.leaf(bias), cfg.ln_epsilon);
        return g.sum_all(g.mul(y, g.leaf(w))).tensor().at(0);
    };

    Graph g;
    Value xv = g.leaf(x, true);
    Value gv = g.leaf(gain, true);
    Value bv = g.leaf(bias, true);
    Value loss = g.sum_all(g.mul(g.layer_norm(xv, gv, bv, cfg.ln_epsilon), g.leaf(w)));
    g.backward(loss);

    const auto check_param = [&](Tensor& param, const Tensor& analytic) {
        for (int i = 0; i < param.size(); ++i) {
            const double keep = param.at(i);
            param.at(i) = keep + cfg.fd_step;
            const double up = loss_of();
            param.at(i) = keep - cfg.fd_step;
            const double down = loss_of();
            param.at(i) = keep;
            const double numeric = (up - down) / (2 * cfg.fd_step);
            const double a = analytic.at(i);
            CHECK(std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}) < 1e-5);
        }
    };
    check_param(x, g.grad(xv));
    check_param(gain, g.grad(gv));
    check_param(bias, g.grad(bv));
}

TEST_CASE("backward product rule and sigmoid slope") {
    Graph g;
    Value x = g.leaf(Tensor::scalar(3.0), true);
    Value y = g.leaf(Tensor::scalar(2.0), true);
    Value f = g.sum_all(g.mul(x, y));
    g.backward(f);
    CHECK(g.grad(x).at(0) == doctest::Approx(2.0));
    CHECK(g.grad(y).at(0) == doctest::Approx(3.0));

    Graph g2;
    Value z = g2.leaf(Tensor::scalar(0.0), true);
    Value s = g2.sum_all(g2.sigmoid(z));
    g2.backward(s);
    CHECK(g2.grad(z).at(0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar seed") {
    Graph g;
    Value x = g.leaf(Tensor({2, 2}), true);
    CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("gradients accumulate over all paths and reset between passes") {
    Graph g;
    Value x = g.leaf(Tensor::scalar(1.5), true);
    // f = x*x + x -> f' = 2x + 1 = 4
    Value f = g.add(g.mul(x, x), x);
    Value loss = g.sum_all(f);
    g.backward(loss);
    CHECK(g.grad(x).at(0) == doctest::Approx(4.0));
    g.backward(loss);  // fresh pass, not doubled
    CHECK(g.grad(x).at(0) == doctest::Approx(4.0));
}

TEST_CASE("leaves without requires_grad receive no gradient") {
    Graph g;
    Value x = g.leaf(Tensor::scalar(2.0), true);
    Value c = g.leaf(Tensor::scalar(5.0), false);
    Value loss = g.sum_all(g.mul(x, c));
    g.backward(loss);
    CHECK(g.has_grad(x));
    CHECK_FALSE(g.has_grad(c));
}

TEST_CASE("forward determinism and bit-exact replay") {
    const auto run = [](Tensor& out) {
        Graph g;
        Value x = g.leaf(rand_tensor({6, 5}, 11), true);
        Value w = g.leaf(rand_tensor({5, 4}, 12), true);
        Value gain = g.leaf(Tensor::ones({4}));
        Value bias = g.leaf(Tensor({4}));
        Value y = g.gelu(g.layer_norm(g.matmul(x, w), gain, bias, 1e-5));
        Value sm = g.softmax(y, 1);
        out = sm.tensor();
        CHECK(g.replay_matches());
        CHECK(out.all_finite());
    };
    Tensor a, b;
    run(a);
    run(b);
    CHECK(a.bit_equal(b));
}

TEST_CASE("interp2d matches hand bilinear weights") {
    Graph g;
    // 2x2 source, upsample to 3x3; center must be the four-corner average
    Value x = g.leaf(Tensor({4, 1}, {0.0, 1.0, 2.0, 3.0}));
    const Tensor& y = g.interp2d(x, 1, 2, 2, 3, 3).tensor();
    CHECK(y.rows() == 9);
    CHECK(y.at(0) == doctest::Approx(0.0));
    CHECK(y.at(2) == doctest::Approx(1.0));
    CHECK(y.at(4) == doctest::Approx(1.5));
    CHECK(y.at(6) == doctest::Approx(2.0));
    CHECK(y.at(8) == doctest::Approx(3.0));
}

TEST_CASE("tensor snapshot golden bytes and round trip") {
    const Tensor t({2, 1}, {1.5, -2.25});
    std::ostringstream out(std::ios::binary);
    save_tensor(t, out);
    const std::string bytes = out.str();
    const unsigned char expected[] = {
        0x02, 0x00, 0x00, 0x00,                          // rank
        0x02, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,  // extents
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF8, 0x3F,  // 1.5
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x02, 0xC0,  // -2.25
    };
    REQUIRE(bytes.size() == sizeof(expected));
    for (size_t i = 0; i < sizeof(expected); ++i) {
        CHECK(static_cast<unsigned char>(bytes[i]) == expected[i]);
    }
    std::istringstream in(bytes, std::ios::binary);
    CHECK(load_tensor(in).bit_equal(t));
}

TEST_CASE("keyed rng streams are independent and deterministic") {
    Rng a = Rng::keyed(1, {2, 3});
    Rng b = Rng::keyed(1, {2, 3});
    Rng c = Rng::keyed(1, {2, 4});
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() != c.next_u64());
    Rng u(99);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform01();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}
