#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tryon/heatmap.hpp"
#include "tryon/tensor.hpp"

#include <cmath>

using namespace tryon;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(s), std::move(v));
}

// keeps elementwise values away from relu/abs/pool kinks
Tensor away_from_zero(Rng& rng, Shape s, double margin = 0.15) {
    std::vector<double> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) {
        x = rng.uniform(margin, 1.0);
        if (rng.uniform() < 0.5) x = -x;
    }
    return Tensor::from_values(std::move(s), std::move(v));
}

} // namespace

TEST_CASE("primitive forward examples") {
    Tensor r = relu(Tensor::from_values({3}, {-1.0, 0.0, 2.0}));
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 0.0);
    CHECK(r.values()[2] == 2.0);

    CHECK(sigmoid(Tensor::from_values({1}, {0.0})).scalar_value() == doctest::Approx(0.5));

    Rng rng(5);
    Tensor img = random_tensor(rng, {1, 9, 9});
    std::vector<double> w(9, 0.0);
    w[4] = 1.0;
    Tensor out = conv2d(img, Tensor::from_values({1, 1, 3, 3}, std::move(w)), 1, 1);
    for (size_t i = 0; i < 81; ++i) CHECK(out.values()[i] == img.values()[i]);
}

TEST_CASE("backward basics: sum, mean of squares, fan-out") {
    Tensor x = Tensor::from_values({2, 3}, {1, -2, 3, 4, -5, 6}, true);
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor y = Tensor::from_values({2}, {1.0, 2.0}, true);
    backward(mean_all(mul(y, y)));
    CHECK(y.grad()[0] == doctest::Approx(1.0));
    CHECK(y.grad()[1] == doctest::Approx(2.0));

    Tensor z = Tensor::from_values({4}, {0.5, 1.5, -2.0, 3.0}, true);
    backward(add(sum_all(z), sum_all(z)));
    for (double g : z.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), Error); // non-scalar loss
    Tensor c = Tensor::from_values({1}, {3.0});
    CHECK_THROWS_AS(backward(c), Error); // no grad ancestry
    CHECK_THROWS_AS(add(x, Tensor::from_values({3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("non-finite outputs are rejected") {
    Tensor big = Tensor::from_values({1}, {1e9});
    CHECK_THROWS_AS(exp_elem(big), NumericError);
    Tensor zero = Tensor::from_values({1}, {0.0});
    CHECK_THROWS_AS(log_elem(zero), NumericError);
}

TEST_CASE("pow_elem rejects grad-tracked exponents") {
    Tensor b = Tensor::from_values({2}, {1.0, 2.0});
    Tensor e = Tensor::from_values({2}, {2.0, 2.0}, true);
    CHECK_THROWS_AS(pow_elem(b, e), Error);
}

TEST_CASE("softmax is a distribution") {
    Rng rng(17);
    Tensor x = random_tensor(rng, {6, 7}, -30.0, 30.0);
    Tensor s = softmax_flat(x);
    double total = 0.0;
    for (double v : s.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);

    // beta-scaled values near 1000 must not overflow
    Tensor hot = scalar_mul(random_tensor(rng, {8, 8}, 0.0, 1.0), 1000.0);
    Tensor sh = softmax_flat(hot);
    CHECK(std::isfinite(sh.values()[0]));
}

TEST_CASE("grad_check exactness and contract") {
    // integer-valued input and power-of-two step: central differences of a
    // linear function are exact in floating point
    Tensor x = Tensor::from_values({5}, {1, 2, 3, 4, 5});
    auto rep = grad_check([](const Tensor& t) { return sum_all(t); }, x, 0.25, 1e-12);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err == 0.0);

    Rng rng(23);
    Tensor y = random_tensor(rng, {4, 4}, -2.0, 2.0);
    auto rep2 = grad_check([](const Tensor& t) { return sum_all(sigmoid(t)); }, y);
    CHECK(rep2.pass);
}

TEST_CASE("finite differences validate every primitive") {
    Rng rng(31);
    const double tol = 1e-4;

    auto expect_pass = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x) {
        auto rep = grad_check(f, x, 1e-5, tol);
        INFO(name << " max rel err " << rep.max_rel_err);
        CHECK(rep.pass);
    };

    Tensor a = random_tensor(rng, {3, 4});
    Tensor b = random_tensor(rng, {3, 4});
    expect_pass("add", [&](const Tensor& t) { return sum_all(mul(add(t, b), b)); }, a);
    expect_pass("sub", [&](const Tensor& t) { return sum_all(mul(sub(t, b), b)); }, a);
    expect_pass("mul", [&](const Tensor& t) { return sum_all(mul(t, b)); }, a);
    expect_pass("scalar_mul", [&](const Tensor& t) { return sum_all(scalar_mul(t, -2.5)); }, a);

    Tensor m1 = random_tensor(rng, {3, 5});
    Tensor m2 = random_tensor(rng, {5, 2});
    expect_pass("matmul lhs", [&](const Tensor& t) { return sum_all(matmul(t, m2)); }, m1);
    expect_pass("matmul rhs", [&](const Tensor& t) { return sum_all(matmul(m1, t)); }, m2);
    Tensor v = random_tensor(rng, {5});
    expect_pass("matmul vec", [&](const Tensor& t) { return sum_all(matmul(m1, t)); }, v);

    for (int stride : {1, 2}) {
        Tensor img = random_tensor(rng, {2, 6, 7});
        Tensor w = random_tensor(rng, {3, 2, 3, 3});
        expect_pass("conv2d input",
                    [&](const Tensor& t) { return sum_all(mul(conv2d(t, w, stride, 1),
                                                              conv2d(t, w, stride, 1))); },
                    img);
        expect_pass("conv2d weight",
                    [&](const Tensor& t) { return mean_all(conv2d(img, t, stride, 1)); }, w);
    }
    {
        Tensor img = random_tensor(rng, {3, 5, 4});
        Tensor w = random_tensor(rng, {3, 2, 4, 4});
        expect_pass("convT input",
                    [&](const Tensor& t) {
                        Tensor y = conv_transpose2d(t, w, 2, 1);
                        return sum_all(mul(y, y));
                    },
                    img);
        expect_pass("convT weight",
                    [&](const Tensor& t) { return mean_all(conv_transpose2d(img, t, 2, 1)); },
                    w);
    }

    expect_pass("relu", [](const Tensor& t) { return sum_all(mul(relu(t), relu(t))); },
                away_from_zero(rng, {4, 5}));
    expect_pass("sigmoid", [](const Tensor& t) { return sum_all(sigmoid(t)); },
                random_tensor(rng, {4, 5}, -2.0, 2.0));
    expect_pass("softmax",
                [&](const Tensor& t) { return sum_all(mul(softmax_flat(t), b)); },
                random_tensor(rng, {3, 4}, -1.0, 1.0));
    expect_pass("log", [](const Tensor& t) { return sum_all(log_elem(t)); },
                random_tensor(rng, {4, 3}, 0.5, 3.0));
    expect_pass("exp", [](const Tensor& t) { return sum_all(exp_elem(t)); },
                random_tensor(rng, {4, 3}, -1.0, 1.0));
    {
        Tensor e = random_tensor(rng, {8}, 1.1, 2.1);
        expect_pass("pow_elem base",
                    [&](const Tensor& t) { return sum_all(pow_elem(t, e)); },
                    random_tensor(rng, {8}, 0.2, 2.0));
    }
    expect_pass("abs", [](const Tensor& t) { return sum_all(mul(abs_elem(t), abs_elem(t))); },
                away_from_zero(rng, {5, 5}));
    expect_pass("mean_all", [&](const Tensor& t) { return mean_all(mul(t, t)); }, a);

    {
        Tensor c2 = random_tensor(rng, {2, 4, 4});
        expect_pass("concat_channels",
                    [&](const Tensor& t) {
                        Tensor cat = concat_channels({t, c2});
                        return sum_all(mul(cat, cat));
                    },
                    random_tensor(rng, {3, 4, 4}));
    }
    expect_pass("max_pool2d",
                [](const Tensor& t) { return sum_all(mul(max_pool2d(t, 2, 2),
                                                         max_pool2d(t, 2, 2))); },
                away_from_zero(rng, {2, 6, 6}));
    expect_pass("global_avg_pool",
                [](const Tensor& t) {
                    Tensor y = global_avg_pool(t);
                    return sum_all(mul(y, y));
                },
                random_tensor(rng, {3, 4, 5}));
    expect_pass("global_max_pool",
                [](const Tensor& t) { return sum_all(global_max_pool(t)); },
                away_from_zero(rng, {3, 4, 5}));

    expect_pass("broadcast scalar",
                [&](const Tensor& t) { return sum_all(mul(broadcast_to(t, {3, 4}), b)); },
                Tensor::from_values({1}, {0.7}));
    {
        Tensor target = random_tensor(rng, {3, 2, 2});
        expect_pass("broadcast channels",
                    [&](const Tensor& t) {
                        return sum_all(mul(broadcast_to(t, {3, 2, 2}), target));
                    },
                    random_tensor(rng, {3}));
        expect_pass("broadcast spatial",
                    [&](const Tensor& t) {
                        return sum_all(mul(broadcast_to(t, {3, 2, 2}), target));
                    },
                    random_tensor(rng, {1, 2, 2}));
    }
    {
        Tensor target = random_tensor(rng, {1, 4, 4});
        expect_pass("channel_mean",
                    [&](const Tensor& t) { return sum_all(mul(channel_mean(t), target)); },
                    random_tensor(rng, {3, 4, 4}));
        expect_pass("channel_max",
                    [&](const Tensor& t) { return sum_all(mul(channel_max(t), target)); },
                    away_from_zero(rng, {3, 4, 4}));
    }
    {
        Tensor gamma = random_tensor(rng, {8}, 0.5, 1.5);
        Tensor beta = random_tensor(rng, {8}, -0.5, 0.5);
        Tensor gx = random_tensor(rng, {8, 3, 3});
        expect_pass("group_norm x",
                    [&](const Tensor& t) {
                        Tensor y = group_norm(t, gamma, beta, 2);
                        return sum_all(mul(y, y));
                    },
                    gx);
        expect_pass("group_norm gamma",
                    [&](const Tensor& t) {
                        Tensor y = group_norm(gx, t, beta, 2);
                        return sum_all(mul(y, y));
                    },
                    gamma);
        expect_pass("group_norm beta",
                    [&](const Tensor& t) {
                        Tensor y = group_norm(gx, gamma, t, 2);
                        return sum_all(mul(y, y));
                    },
                    beta);
    }
}

TEST_CASE("awing composite loss gradient vs finite differences") {
    Rng rng(41);
    AWingParams params;
    // random gt in [0,1], prediction kept away from the branch boundary
    std::vector<double> gt(64), pred(64);
    for (auto& g : gt) g = rng.uniform(0.0, 1.0);
    for (size_t i = 0; i < pred.size(); ++i) {
        double d;
        do {
            d = rng.uniform(-1.2, 1.2);
        } while (std::abs(std::abs(d) - params.theta) < 2e-3 || std::abs(d) < 2e-3);
        pred[i] = gt[i] - d;
    }
    Tensor gt_t = Tensor::from_values({8, 8}, gt);
    auto rep = grad_check(
        [&](const Tensor& t) { return mean_all(awing_loss_map(t, gt_t, params)); },
        Tensor::from_values({8, 8}, pred), 1e-5, 1e-4);
    INFO("awing max rel err " << rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("conv gradients preserve operand shapes") {
    Rng rng(47);
    Tensor img = random_tensor(rng, {2, 8, 8});
    Tensor w = random_tensor(rng, {4, 2, 3, 3});
    Tensor xi = img.detached(true);
    Tensor wi = w.detached(true);
    backward(sum_all(conv2d(xi, wi, 2, 1)));
    CHECK(xi.grad().size() == static_cast<size_t>(numel(img.shape())));
    CHECK(wi.grad().size() == static_cast<size_t>(numel(w.shape())));
}

TEST_CASE("trace yields a topologically ordered acyclic graph") {
    Rng rng(53);
    Tensor x = random_tensor(rng, {3, 3});
    Tensor xt = x.detached(true);
    Tensor y = sum_all(mul(sigmoid(xt), add(xt, xt)));
    Graph g = trace(y);
    CHECK(g.nodes.size() >= 5);
    for (size_t i = 0; i < g.nodes.size(); ++i)
        for (int in : g.nodes[i].inputs) {
            CHECK(in >= 0);
            CHECK(in < static_cast<int>(i)); // inputs precede consumers
        }
    CHECK(g.nodes.back().op == Op::sum_all);
}

TEST_CASE("gradients accumulate across repeated backward calls") {
    Tensor x = Tensor::from_values({3}, {1.0, 2.0, 3.0}, true);
    backward(sum_all(x));
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 2.0);
    x.zero_grad();
    backward(sum_all(x));
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    NoGradGuard guard;
    Tensor y = sum_all(mul(x, x));
    CHECK(!y.requires_grad());
    CHECK_THROWS_AS(backward(y), Error);
}
