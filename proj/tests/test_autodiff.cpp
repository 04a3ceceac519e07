#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "bmlm/autodiff.hpp"
#include "bmlm/errors.hpp"
#include "bmlm/rng.hpp"
#include "support/grad_check.hpp"

using bmlm::Tape;
using bmlm::Tensor;
using bmlm::Var;
namespace ops = bmlm::ops;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    bmlm::Rng rng(seed);
    std::vector<double> out(n);
    for (double& v : out) v = scale * rng.normal();
    return out;
}

// Reduces an [m,n] output to a scalar through fixed random coefficients, so
// finite differences see every output element with a distinct weight.
Var weighted_sum(Tape<double>& t, Var a, std::uint64_t seed) {
    const Tensor<double>& av = t.value(a);
    Var coeffs = t.constant(Tensor<double>(av.shape, random_values(av.numel(), seed)));
    return ops::sum(t, ops::mul(t, a, coeffs));
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic") {
    Tape<double> t;
    Var a = t.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    Var b = t.leaf(Tensor<double>({2, 2}, {5, 6, 7, 8}));
    const Tensor<double>& c = t.value(ops::matmul(t, a, b));
    CHECK(c.data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Tape<double> t;
    Var a = t.leaf(Tensor<double>({2, 3}));
    Var b = t.leaf(Tensor<double>({2, 3}));
    CHECK_THROWS_AS(ops::matmul(t, a, b), bmlm::ShapeError);
}

TEST_CASE("softmax of a uniform row is uniform and rows sum to one") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({1, 2}, {0, 0}));
    const Tensor<double>& y = t.value(ops::softmax(t, x));
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(0.5));

    Var r = t.leaf(Tensor<double>({4, 7}, random_values(28, 11, 3.0)));
    const Tensor<double>& s = t.value(ops::softmax(t, r));
    for (std::size_t i = 0; i < 4; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < 7; ++j) {
            const double p = s.at(i, j);
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            row += p;
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("gelu is zero at zero and matches the tanh form elsewhere") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({1, 3}, {0.0, 1.0, -2.5}));
    const Tensor<double>& y = t.value(ops::gelu(t, x));
    CHECK(y.data[0] == 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
        const double v = t.value(x).data[i];
        const double ref =
            0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
        CHECK(y.data[i] == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy of all-zero logits is ln V with softmax-minus-onehot gradient") {
    const std::size_t v = 5;
    Tape<double> t;
    Var logits = t.leaf(Tensor<double>({1, v}), true);
    Var loss = ops::cross_entropy(t, logits, {3});
    CHECK(t.value(loss).item() == doctest::Approx(std::log(double(v))).epsilon(1e-12));
    t.backward(loss);
    const Tensor<double>& g = t.grad(logits);
    for (std::size_t j = 0; j < v; ++j) {
        const double expect = 1.0 / double(v) - (j == 3 ? 1.0 : 0.0);
        CHECK(g.data[j] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    Tape<double> t;
    Var logits = t.leaf(Tensor<double>({2, 4}));
    CHECK_THROWS_AS(ops::cross_entropy(t, logits, {1, 4}), bmlm::DomainError);
}

TEST_CASE("sum backward is all ones") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({3, 2}, random_values(6, 5)), true);
    t.backward(ops::sum(t, x));
    for (double g : t.grad(x).data) CHECK(g == 1.0);
}

TEST_CASE("backward demands a scalar loss and grads demand a backward pass") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({2, 2}), true);
    CHECK_THROWS_AS(t.backward(x), bmlm::ContractError);
    Var s = ops::sum(t, x);
    CHECK_THROWS_AS(t.grad(x), bmlm::ContractError);
    t.backward(s);
    CHECK(t.grad(x).numel() == 4);
}

TEST_CASE("layer norm output is standardized before the affine") {
    Tape<double> t;
    const std::size_t rows = 6, cols = 16;
    Var x = t.leaf(Tensor<double>({rows, cols}, random_values(rows * cols, 21, 2.0)));
    Var gain = t.leaf(Tensor<double>({cols}, std::vector<double>(cols, 1.0)));
    Var bias = t.leaf(Tensor<double>({cols}));
    const Tensor<double>& y = t.value(ops::layer_norm(t, x, gain, bias));
    for (std::size_t i = 0; i < rows; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < cols; ++j) mean += y.at(i, j);
        mean /= cols;
        for (std::size_t j = 0; j < cols; ++j) {
            var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        }
        var /= cols;
        CHECK(std::fabs(mean) <= 1e-5);
        CHECK(std::fabs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("reused nodes accumulate gradient") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>::scalar(3.0), true);
    // y = x*x + x + x: dy/dx = 2x + 2 = 8
    Var y = ops::add(t, ops::mul(t, x, x), ops::add(t, x, x));
    t.backward(y);
    CHECK(t.grad(x).item() == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("backward is linear in the loss scale") {
    const auto base = random_values(12, 33);
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({3, 4}, base), true);
    Var loss = weighted_sum(t, ops::gelu(t, x), 34);
    t.backward(loss);
    const std::vector<double> g1 = t.grad(x).data;

    Tape<double> t2;
    Var x2 = t2.leaf(Tensor<double>({3, 4}, base), true);
    Var loss2 = ops::scale(t2, weighted_sum(t2, ops::gelu(t2, x2), 34), 2.5);
    t2.backward(loss2);
    const std::vector<double> g2 = t2.grad(x2).data;
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g2[i] == doctest::Approx(2.5 * g1[i]).epsilon(1e-12));
    }
}

TEST_CASE("identical inputs give bit-identical outputs and gradients") {
    const auto base = random_values(20, 41);
    auto run = [&](std::vector<double>& grads) {
        Tape<double> t;
        Var x = t.leaf(Tensor<double>({4, 5}, base), true);
        Var g1 = t.leaf(Tensor<double>({5}, std::vector<double>(5, 1.0)));
        Var b1 = t.leaf(Tensor<double>({5}));
        Var y = ops::softmax(t, ops::layer_norm(t, ops::gelu(t, x), g1, b1));
        Var loss = weighted_sum(t, y, 42);
        t.backward(loss);
        grads = t.grad(x).data;
        return t.value(loss).item();
    };
    std::vector<double> ga, gb;
    const double la = run(ga);
    const double lb = run(gb);
    CHECK(la == lb);
    CHECK(ga == gb);
}

TEST_CASE("dropout keeps or rescales elements and rejects bad probabilities") {
    Tape<double> t;
    Var x = t.leaf(Tensor<double>({8, 8}, std::vector<double>(64, 1.0)));
    bmlm::Rng rng(9);
    Var same = ops::dropout(t, x, 0.0, rng);
    CHECK(same.id == x.id);

    Var dropped = ops::dropout(t, x, 0.25, rng);
    std::size_t zeros = 0;
    for (double v : t.value(dropped).data) {
        const bool kept = v == doctest::Approx(1.0 / 0.75).epsilon(1e-12);
        const bool zero = v == 0.0;
        CHECK((kept || zero));
        zeros += zero ? 1 : 0;
    }
    CHECK(zeros > 0);
    CHECK(zeros < 64);

    CHECK_THROWS_AS(ops::dropout(t, x, 1.0, rng), bmlm::DomainError);
    CHECK_THROWS_AS(ops::dropout(t, x, -0.1, rng), bmlm::DomainError);
}

TEST_CASE("gather_rows rejects out-of-range indices") {
    Tape<double> t;
    Var table = t.leaf(Tensor<double>({4, 3}));
    CHECK_THROWS_AS(ops::gather_rows(t, table, {0, 4}), bmlm::DomainError);
}

TEST_CASE("zero-weight cross entropy rows contribute nothing") {
    const auto base = random_values(12, 55);
    auto loss_for = [&](std::size_t target_row1) {
        Tape<double> t;
        Var logits = t.leaf(Tensor<double>({3, 4}, base), true);
        Var loss = ops::cross_entropy(t, logits, {2, target_row1, 0}, {1.0, 0.0, 1.0});
        t.backward(loss);
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(t.grad(logits).at(1, j) == 0.0);
        }
        return t.value(loss).item();
    };
    // Perturbing the masked row's target cannot move the loss.
    CHECK(loss_for(0) == loss_for(3));

    Tape<double> t;
    Var logits = t.leaf(Tensor<double>({2, 4}, random_values(8, 56)));
    CHECK_THROWS_AS(ops::cross_entropy(t, logits, {0, 1}, {0.0, 0.0}), bmlm::ContractError);
}

// Finite-difference checks, one kernel at a time. Each closure rebuilds the
// graph from the mutable storage so central differences see the whole path.
TEST_CASE("kernel gradients match finite differences") {
    const double tol = 1e-4;
    bmlm::Rng seeds(1234);

    SUBCASE("matmul, both slots") {
        for (int trial = 0; trial < 5; ++trial) {
            auto a = random_values(6, seeds.next_u64());
            auto b = random_values(8, seeds.next_u64());
            const std::uint64_t wseed = seeds.next_u64();
            auto build = [&](Tape<double>& t) {
                Var av = t.leaf(Tensor<double>({3, 2}, a), true);
                Var bv = t.leaf(Tensor<double>({2, 4}, b), true);
                return std::tuple{av, bv, weighted_sum(t, ops::matmul(t, av, bv), wseed)};
            };
            Tape<double> t;
            auto [av, bv, loss] = build(t);
            t.backward(loss);
            // Recompute through a fresh tape each probe.
            auto fresh = [&]() {
                Tape<double> ft;
                return ft.value(std::get<2>(build(ft))).item();
            };
            CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
            CHECK(grad_check::max_rel_error(b, t.grad(bv).data, fresh) <= tol);
        }
    }

    SUBCASE("matmul_nt both slots") {
        auto a = random_values(6, seeds.next_u64());
        auto b = random_values(8, seeds.next_u64());
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var av = t.leaf(Tensor<double>({3, 2}, a), true);
            Var bv = t.leaf(Tensor<double>({4, 2}, b), true);
            return std::tuple{av, bv, weighted_sum(t, ops::matmul_nt(t, av, bv), wseed)};
        };
        Tape<double> t;
        auto [av, bv, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<2>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
        CHECK(grad_check::max_rel_error(b, t.grad(bv).data, fresh) <= tol);
    }

    SUBCASE("add, add_rowvec, mul, scale") {
        auto a = random_values(8, seeds.next_u64());
        auto b = random_values(8, seeds.next_u64());
        auto row = random_values(4, seeds.next_u64());
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var av = t.leaf(Tensor<double>({2, 4}, a), true);
            Var bv = t.leaf(Tensor<double>({2, 4}, b), true);
            Var rv = t.leaf(Tensor<double>({4}, row), true);
            Var y = ops::scale(t, ops::mul(t, ops::add(t, av, bv), av), 0.7);
            return std::tuple{av, bv, rv, weighted_sum(t, ops::add_rowvec(t, y, rv), wseed)};
        };
        Tape<double> t;
        auto [av, bv, rv, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<3>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
        CHECK(grad_check::max_rel_error(b, t.grad(bv).data, fresh) <= tol);
        CHECK(grad_check::max_rel_error(row, t.grad(rv).data, fresh) <= tol);
    }

    SUBCASE("gelu") {
        auto a = random_values(10, seeds.next_u64());
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var av = t.leaf(Tensor<double>({2, 5}, a), true);
            return std::tuple{av, weighted_sum(t, ops::gelu(t, av), wseed)};
        };
        Tape<double> t;
        auto [av, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<1>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
    }

    SUBCASE("layer_norm, all three slots") {
        auto x = random_values(12, seeds.next_u64(), 1.5);
        auto g = random_values(4, seeds.next_u64());
        auto b = random_values(4, seeds.next_u64());
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var xv = t.leaf(Tensor<double>({3, 4}, x), true);
            Var gv = t.leaf(Tensor<double>({4}, g), true);
            Var bv = t.leaf(Tensor<double>({4}, b), true);
            return std::tuple{xv, gv, bv,
                              weighted_sum(t, ops::layer_norm(t, xv, gv, bv), wseed)};
        };
        Tape<double> t;
        auto [xv, gv, bv, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<3>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(x, t.grad(xv).data, fresh) <= tol);
        CHECK(grad_check::max_rel_error(g, t.grad(gv).data, fresh) <= tol);
        CHECK(grad_check::max_rel_error(b, t.grad(bv).data, fresh) <= tol);
    }

    SUBCASE("softmax") {
        auto a = random_values(12, seeds.next_u64(), 2.0);
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var av = t.leaf(Tensor<double>({3, 4}, a), true);
            return std::tuple{av, weighted_sum(t, ops::softmax(t, av), wseed)};
        };
        Tape<double> t;
        auto [av, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<1>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
    }

    SUBCASE("gather, slices, concats") {
        auto table = random_values(15, seeds.next_u64());
        const std::uint64_t wseed = seeds.next_u64();
        const std::vector<std::size_t> idx{4, 0, 2, 2};
        auto build = [&](Tape<double>& t) {
            Var tv = t.leaf(Tensor<double>({5, 3}, table), true);
            Var g = ops::gather_rows(t, tv, idx);                 // [4,3]
            Var top = ops::slice_rows(t, g, 0, 2);                // [2,3]
            Var bottom = ops::slice_rows(t, g, 2, 2);             // [2,3]
            Var wide = ops::concat_cols(t, {top, bottom});        // [2,6]
            Var left = ops::slice_cols(t, wide, 0, 3);            // [2,3]
            Var tall = ops::concat_rows(t, {left, bottom});       // [4,3]
            return std::tuple{tv, weighted_sum(t, tall, wseed)};
        };
        Tape<double> t;
        auto [tv, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<1>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(table, t.grad(tv).data, fresh) <= tol);
    }

    SUBCASE("cross entropy, unweighted and weighted") {
        auto logits = random_values(12, seeds.next_u64(), 2.0);
        const std::vector<std::size_t> targets{1, 3, 0};
        for (const std::vector<double>& weights :
             {std::vector<double>{}, std::vector<double>{0.5, 0.0, 2.0}}) {
            auto build = [&](Tape<double>& t) {
                Var lv = t.leaf(Tensor<double>({3, 4}, logits), true);
                return std::tuple{lv, ops::cross_entropy(t, lv, targets, weights)};
            };
            Tape<double> t;
            auto [lv, loss] = build(t);
            t.backward(loss);
            auto fresh = [&]() {
                Tape<double> ft;
                return ft.value(std::get<1>(build(ft))).item();
            };
            CHECK(grad_check::max_rel_error(logits, t.grad(lv).data, fresh) <= tol);
        }
    }

    SUBCASE("dropout with a fixed mask") {
        auto a = random_values(16, seeds.next_u64());
        const std::uint64_t mask_seed = seeds.next_u64();
        const std::uint64_t wseed = seeds.next_u64();
        auto build = [&](Tape<double>& t) {
            Var av = t.leaf(Tensor<double>({4, 4}, a), true);
            bmlm::Rng rng(mask_seed);
            return std::tuple{av, weighted_sum(t, ops::dropout(t, av, 0.3, rng), wseed)};
        };
        Tape<double> t;
        auto [av, loss] = build(t);
        t.backward(loss);
        auto fresh = [&]() {
            Tape<double> ft;
            return ft.value(std::get<1>(build(ft))).item();
        };
        CHECK(grad_check::max_rel_error(a, t.grad(av).data, fresh) <= tol);
    }
}
