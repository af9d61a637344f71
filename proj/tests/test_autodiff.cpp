#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "meet/gradcheck.hpp"
#include "meet/rng.hpp"
#include "meet/tape.hpp"

using meet::GradMap;
using meet::Params;
using meet::SeededRng;
using meet::Tape;
using meet::Tensor;

namespace {

// Builds the same graph twice: once for backward(), once per finite-difference
// evaluation, and compares every gradient coordinate.
using GraphFn = std::function<Tape::NodeId(Tape&, const std::map<std::string, Tape::NodeId>&)>;

void check_gradients(const Params& params, const GraphFn& build, double tol = 1e-3) {
    Tape tape;
    std::map<std::string, Tape::NodeId> ids;
    for (const auto& [name, value] : params) ids[name] = tape.leaf(value, name, true);
    Tape::NodeId loss = build(tape, ids);
    GradMap analytic = tape.backward(loss);

    auto loss_fn = [&](const Params& p) {
        Tape t;
        std::map<std::string, Tape::NodeId> lids;
        for (const auto& [name, value] : p) lids[name] = t.leaf(value, name, true);
        return t.value(build(t, lids)).item();
    };
    meet::FdResult fd = meet::finite_diff_gradient(loss_fn, params, 1e-5);
    REQUIRE(fd.non_finite.empty());
    for (const auto& [name, grad] : analytic) {
        INFO("parameter " << name);
        REQUIRE(meet::max_relative_error(grad, fd.grads.at(name)) < tol);
    }
}

} // namespace

TEST_CASE("product rule: d(x*y) at (2,3)") {
    Tape tape;
    Tape::NodeId x = tape.leaf(Tensor({1, 1}, {2.0}), "x", true);
    Tape::NodeId y = tape.leaf(Tensor({1, 1}, {3.0}), "y", true);
    GradMap g = tape.backward(tape.sum(tape.matmul(x, y)));
    CHECK(g.at("x")[0] == 3.0);
    CHECK(g.at("y")[0] == 2.0);
}

TEST_CASE("cross-entropy at uniform logits gives 1/V - onehot") {
    const int v = 7, target = 3;
    Tape tape;
    Tape::NodeId logits = tape.leaf(Tensor({1, static_cast<std::size_t>(v)}), "logits", true);
    Tape::NodeId nll = tape.scale(tape.sum(tape.gather(tape.log_softmax(logits), {target})), -1.0);
    GradMap g = tape.backward(nll);
    for (int i = 0; i < v; ++i) {
        const double expected = 1.0 / v - (i == target ? 1.0 : 0.0);
        CHECK(g.at("logits")[static_cast<std::size_t>(i)] == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    Tape tape;
    Tape::NodeId x = tape.input(Tensor({4}));
    const Tensor& y = tape.value(tape.softmax(x));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("softmax rows sum to one within 1e-12") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed, "softmax");
        Tensor x = Tensor::gaussian({5, 9}, 4.0, rng);
        Tape tape;
        const Tensor& y = tape.value(tape.softmax(tape.input(x)));
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 9; ++c) s += y.at(r, c);
            REQUIRE(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax over empty axis is rejected") {
    Tape tape;
    CHECK_THROWS_AS(tape.softmax(tape.input(Tensor({0}))), std::invalid_argument);
}

TEST_CASE("layer normalization of [1,2,3,4] matches the formula") {
    const double eps = 1e-5;
    Tape tape;
    Tape::NodeId x = tape.input(Tensor({1, 4}, {1, 2, 3, 4}));
    Tape::NodeId g = tape.input(Tensor::full({4}, 1.0));
    Tape::NodeId b = tape.input(Tensor({4}));
    const Tensor& y = tape.value(tape.layer_norm(x, g, b, eps));

    const double mu = 2.5, var = 1.25;
    double mean = 0.0, second = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double expected = (static_cast<double>(i + 1) - mu) / std::sqrt(var + eps);
        REQUIRE(y[i] == Catch::Approx(expected).margin(1e-12));
        mean += y[i];
        second += y[i] * y[i];
    }
    CHECK(std::abs(mean / 4.0) < 1e-12);
    CHECK(second / 4.0 == Catch::Approx(1.0).epsilon(1e-4));  // variance 1 up to eps
}

TEST_CASE("causal mask: masked entries ignore positions above the diagonal") {
    SeededRng rng(11);
    Tensor scores = Tensor::gaussian({5, 5}, 2.0, rng);
    Tape tape;
    const Tensor& masked = tape.value(tape.causal_mask_fill(tape.input(scores)));
    Tensor poked = scores;
    // Change every strictly-upper entry; the masked output must not move.
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) poked.at(i, j) += 123.0;
    Tape tape2;
    const Tensor& masked2 = tape2.value(tape2.causal_mask_fill(tape2.input(poked)));
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            REQUIRE(masked.at(i, j) == masked2.at(i, j));
            if (j > i) REQUIRE(masked.at(i, j) == Tape::kMaskFill);
        }
    }
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape tape;
    Tape::NodeId x = tape.leaf(Tensor({2, 2}), "x", true);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("trainable leaf disconnected from the loss gets an exact zero gradient") {
    Tape tape;
    Tape::NodeId x = tape.leaf(Tensor({1, 1}, {2.0}), "x", true);
    Tape::NodeId unused = tape.leaf(Tensor({3}), "unused", true);
    (void)unused;
    GradMap g = tape.backward(tape.sum(tape.scale(x, 2.0)));
    REQUIRE(g.count("unused") == 1);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(g.at("unused")[i] == 0.0);
}

TEST_CASE("backward replayed twice is bit-identical") {
    SeededRng rng(77);
    Tensor a = Tensor::gaussian({3, 4}, 1.0, rng);
    Tensor b = Tensor::gaussian({4, 2}, 1.0, rng);
    Tape tape;
    Tape::NodeId na = tape.leaf(a, "a", true);
    Tape::NodeId nb = tape.leaf(b, "b", true);
    Tape::NodeId loss = tape.sum(tape.gelu(tape.matmul(na, nb)));
    GradMap g1 = tape.backward(loss);
    GradMap g2 = tape.backward(loss);
    for (const auto& [name, grad] : g1) {
        const Tensor& other = g2.at(name);
        for (std::size_t i = 0; i < grad.numel(); ++i) REQUIRE(grad[i] == other[i]);
    }
}

TEST_CASE("per-primitive gradients agree with finite differences over 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SeededRng rng(seed, "prim");
        Params p;
        p.emplace("a", Tensor::gaussian({3, 4}, 0.7, rng));
        p.emplace("b", Tensor::gaussian({4, 3}, 0.7, rng));
        p.emplace("bias", Tensor::gaussian({3}, 0.7, rng));
        p.emplace("gain", Tensor::gaussian({4}, 0.3, rng));
        p.emplace("table", Tensor::gaussian({6, 4}, 0.7, rng));

        check_gradients(p, [](Tape& t, const std::map<std::string, Tape::NodeId>& ids) {
            // matmul (both transposes), add (plain + broadcast), scale, gelu,
            // softmax, log-softmax, gather, concat, causal mask, embedding,
            // layer norm, sum: one composite loss touching every primitive.
            Tape::NodeId a = ids.at("a");
            Tape::NodeId b = ids.at("b");
            Tape::NodeId emb = t.embedding(ids.at("table"), {0, 2, 5});              // [3 x 4]
            Tape::NodeId normed = t.layer_norm(emb, ids.at("gain"), t.input(Tensor({4})), 1e-5);
            Tape::NodeId mixed = t.add(a, normed);                                   // [3 x 4]
            Tape::NodeId prod = t.matmul(mixed, b);                                  // [3 x 3]
            Tape::NodeId prod_t = t.matmul(b, mixed, true, true);                    // [3 x 3]
            Tape::NodeId both = t.add(prod, prod_t);
            Tape::NodeId biased = t.add(both, ids.at("bias"));                       // broadcast add
            Tape::NodeId masked = t.causal_mask_fill(t.scale(biased, 0.5));
            Tape::NodeId att = t.softmax(masked);
            Tape::NodeId logp = t.log_softmax(t.gelu(t.matmul(att, mixed)));         // [3 x 4]
            Tape::NodeId picks = t.gather(logp, {1, 0, 3});
            Tape::NodeId joined = t.concat(picks, t.gather(t.log_softmax(biased), {0, 1, 2}));
            return t.sum(joined);
        });
    }
}

TEST_CASE("finite differences: quadratic, constant, and non-finite flagging") {
    Params p;
    p.emplace("x", Tensor({1}, {3.0}));

    auto square = [](const Params& q) { return q.at("x")[0] * q.at("x")[0]; };
    meet::FdResult r = meet::finite_diff_gradient(square, p, 1e-5);
    CHECK(std::abs(r.grads.at("x")[0] - 6.0) < 1e-6);
    CHECK(r.non_finite.empty());

    auto constant = [](const Params&) { return 4.25; };
    r = meet::finite_diff_gradient(constant, p, 1e-5);
    CHECK(r.grads.at("x")[0] == 0.0);

    Params q;
    q.emplace("x", Tensor({2}, {0.0, 1.0}));
    auto rooty = [](const Params& pp) {
        return std::sqrt(pp.at("x")[0]) + pp.at("x")[1];  // NaN when x[0] dips below zero
    };
    r = meet::finite_diff_gradient(rooty, q, 1e-5);
    REQUIRE(r.non_finite.size() == 1);
    CHECK(r.non_finite[0].param == "x");
    CHECK(r.non_finite[0].index == 0);
    CHECK(std::isnan(r.grads.at("x")[0]));
    CHECK(std::abs(r.grads.at("x")[1] - 1.0) < 1e-6);

    CHECK_THROWS_AS(meet::finite_diff_gradient(square, p, 0.0), std::invalid_argument);
}
