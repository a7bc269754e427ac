#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "qrnn/autograd.hpp"

using namespace qrnn;

namespace {

// scalar reduction: ones^T * M * ones
NodeId sum_all(Tape& t, NodeId m) {
    const Matrix& v = t.value(m);
    NodeId left = t.constant(Matrix(1, v.rows(), 1.0));
    NodeId right = t.constant(Matrix(v.cols(), 1, 1.0));
    return t.matmul(t.matmul(left, m), right);
}

}  // namespace

TEST_CASE("backward on linear graph gives the input as gradient", "[autograd]") {
    // loss = sum(W x) => dloss/dW = outer(1, x)
    Tape t;
    Matrix w = Matrix::from_rows({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}});
    Matrix x = Matrix::column({0.5, -1.0, 2.0});
    NodeId wid = t.parameter(w);
    NodeId xid = t.constant(x);
    NodeId loss = sum_all(t, t.matmul(wid, xid));
    Gradients g = t.backward(loss);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 3; ++c) CHECK(g.at(wid)(r, c) == x(c, 0));
}

TEST_CASE("backward chain rule closed form", "[autograd]") {
    // loss = sigmoid(w)^2 => grad = 2 s (s (1-s))
    Tape t;
    NodeId w = t.parameter(Matrix(1, 1, 0.3));
    NodeId s = t.sigmoid(w);
    NodeId loss = t.mul(s, s);
    Gradients g = t.backward(loss);
    const double sv = t.value(s)(0, 0);
    CHECK(g.at(w)(0, 0) == Catch::Approx(2.0 * sv * sv * (1.0 - sv)).epsilon(1e-14));
}

TEST_CASE("backward requires a scalar loss and zeroes unreachable leaves", "[autograd]") {
    Tape t;
    NodeId a = t.parameter(Matrix(2, 2, 1.0));
    NodeId b = t.parameter(Matrix(1, 1, 2.0));  // never used in the loss
    NodeId loss = sum_all(t, a);
    CHECK_THROWS_AS(t.backward(a), std::invalid_argument);
    Gradients g = t.backward(loss);
    CHECK(g.at(b)(0, 0) == 0.0);
}

TEST_CASE("finite differences across all differentiable primitives", "[autograd]") {
    std::mt19937_64 rng(19);

    SECTION("matmul + sigmoid") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            return sum_all(t, t.sigmoid(t.matmul(in[0], in[1])));
        };
        std::vector<Matrix> inputs{random_uniform(rng, 3, 4, -1, 1),
                                   random_uniform(rng, 4, 2, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
    SECTION("tanh, mul, add, sub, concat") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            NodeId m = t.mul(t.tanh(in[0]), t.add(in[1], in[2]));
            NodeId c = t.concat_rows(m, t.sub(in[0], in[1]));
            return sum_all(t, c);
        };
        std::vector<Matrix> inputs{random_uniform(rng, 3, 3, -1, 1),
                                   random_uniform(rng, 3, 3, -1, 1),
                                   random_uniform(rng, 3, 3, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
    SECTION("column-broadcast bias add") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            return sum_all(t, t.sigmoid(t.add(in[0], in[1])));
        };
        std::vector<Matrix> inputs{random_uniform(rng, 4, 5, -1, 1),
                                   random_uniform(rng, 4, 1, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
    SECTION("gather scatters gradient to rows") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            return sum_all(t, t.tanh(t.gather(in[0], {1, 0, 1})));
        };
        std::vector<Matrix> inputs{random_uniform(rng, 3, 4, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
    SECTION("softmax cross entropy") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            return t.softmax_xent(t.matmul(in[0], in[1]), {0, 2, 1});
        };
        std::vector<Matrix> inputs{random_uniform(rng, 3, 4, -1, 1),
                                   random_uniform(rng, 4, 3, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
    SECTION("two-layer composite") {
        auto build = [](Tape& t, const std::vector<NodeId>& in) {
            NodeId h = t.sigmoid(t.matmul(in[0], in[2]));
            NodeId logits = t.add(t.matmul(in[1], h), in[3]);
            return t.softmax_xent(logits, {1, 0});
        };
        std::vector<Matrix> inputs{random_uniform(rng, 4, 3, -1, 1),
                                   random_uniform(rng, 2, 4, -1, 1),
                                   random_uniform(rng, 3, 2, -1, 1),
                                   random_uniform(rng, 2, 1, -1, 1)};
        CHECK(grad_check(build, inputs, 1e-5) < 1e-4);
    }
}

TEST_CASE("exact derivative cases", "[autograd]") {
    // tanh at 0 has derivative exactly 1
    {
        Tape t;
        NodeId w = t.parameter(Matrix(1, 1, 0.0));
        Gradients g = t.backward(t.tanh(w));
        CHECK(g.at(w)(0, 0) == 1.0);
    }
    // clip: 1 strictly inside, 0 strictly outside and at the bounds
    for (auto [x, expect] : {std::pair{0.3, 1.0}, {-2.0, 0.0}, {2.0, 0.0},
                             {-1.0, 0.0}, {1.0, 0.0}}) {
        Tape t;
        NodeId w = t.parameter(Matrix(1, 1, x));
        Gradients g = t.backward(t.clip(w, -1.0, 1.0));
        CHECK(g.at(w)(0, 0) == expect);
    }
}

TEST_CASE("ste_quantize forwards quantized values and passes gradients exactly", "[autograd]") {
    QuantConfig cfg;
    cfg.weight_bits = 2;
    cfg.balanced = true;
    cfg.gamma = 3.0;
    cfg.threshold_stat = ThresholdStat::median_abs;

    Tape t;
    Matrix p = Matrix::from_rows({{-3.0, -1.0}, {1.0, 3.0}});
    NodeId pid = t.parameter(p);
    NodeId q = t.ste_quantize_weights(pid, cfg);
    // exact-balance fixed point: quantized values equal the input
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(t.value(q)[i] == Catch::Approx(p[i]).margin(1e-12));

    // arbitrary downstream graph; dloss/dp must equal dloss/dq elementwise
    NodeId loss = sum_all(t, t.mul(q, q));
    Gradients g = t.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g.at(pid)[i] == g.at(q)[i]);

    // activation variant forward
    Tape t2;
    NodeId a = t2.parameter(Matrix(1, 1, 0.6));
    NodeId aq = t2.ste_quantize_activation(a, 2, ActivationRange::unit01);
    CHECK(t2.value(aq)(0, 0) == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
    Gradients g2 = t2.backward(t2.mul(aq, aq));
    CHECK(g2.at(a)(0, 0) == g2.at(aq)(0, 0));
}

TEST_CASE("dropout semantics", "[autograd]") {
    std::mt19937_64 rng(21);

    // eval is the identity (no node inserted)
    {
        Tape t(&rng);
        NodeId a = t.parameter(Matrix(4, 4, 1.0));
        CHECK(t.dropout(a, 0.5, /*train=*/false) == a);
        CHECK(t.dropout(a, 0.0, /*train=*/true) == a);
    }
    // p = 1 zeroes everything
    {
        Tape t(&rng);
        NodeId a = t.parameter(Matrix(3, 3, 2.0));
        NodeId d = t.dropout(a, 1.0, true);
        for (double v : t.value(d).data()) CHECK(v == 0.0);
    }
    // drop fraction ~ p, survivors scaled by 1/(1-p)
    {
        const double p = 0.3;
        const std::size_t n = 100000;
        Tape t(&rng);
        NodeId a = t.parameter(Matrix(1, n, 1.0));
        NodeId d = t.dropout(a, p, true);
        std::size_t zeros = 0;
        for (double v : t.value(d).data()) {
            if (v == 0.0) ++zeros;
            else CHECK(v == 1.0 / (1.0 - p));
        }
        const double frac = static_cast<double>(zeros) / n;
        // binomial: sd ~ sqrt(p(1-p)/n) ~ 0.0014; allow 5 sigma
        CHECK(std::abs(frac - p) < 0.0073);
    }
}

TEST_CASE("identical seeds give identical tapes, values and gradients", "[autograd]") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tape t(&rng);
        NodeId w = t.parameter(random_uniform(rng, 4, 4, -1, 1));
        NodeId d = t.dropout(t.sigmoid(w), 0.5, true);
        NodeId loss = sum_all(t, d);
        Gradients g = t.backward(loss);
        return std::pair{t.value(loss)(0, 0), g.at(w)};
    };
    auto [l1, g1] = run();
    auto [l2, g2] = run();
    CHECK(l1 == l2);
    for (std::size_t i = 0; i < g1.numel(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("grad_check rejects stochastic/quantized subgraphs", "[autograd]") {
    auto build = [](Tape& t, const std::vector<NodeId>& in) {
        return sum_all(t, t.ste_quantize_activation(t.sigmoid(in[0]), 2,
                                                    ActivationRange::unit01));
    };
    std::vector<Matrix> inputs{Matrix(2, 2, 0.1)};
    CHECK_THROWS_AS(grad_check(build, inputs, 1e-5), std::logic_error);
}
