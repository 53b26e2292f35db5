#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kan/tensor.hpp"
#include "test_support.hpp"

using namespace kan;
using namespace kan::testing;

namespace {

template <typename Scalar>
double run_loss(const std::function<Tensor<Scalar>()>& forward) {
    return static_cast<double>(sum(forward()).item());
}

}  // namespace

TEST_CASE("matmul identity and hand product") {
    Tensor<float> eye(Shape{2, 2}, {1, 0, 0, 1});
    Tensor<float> b(Shape{2, 2}, {5, 6, 7, 8});
    Tensor<float> r = matmul(eye, b);
    CHECK(r.values() == std::vector<float>{5, 6, 7, 8});

    Tensor<float> a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor<float> p = matmul(a, b);
    CHECK(p.values() == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch reports both shapes") {
    Tensor<float> a(Shape{2, 3});
    Tensor<float> b(Shape{4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient matches central finite differences") {
    Xoshiro256ss rng(1);
    auto a = random_tensor<double>(Shape{3, 4}, rng);
    auto b = random_tensor<double>(Shape{4, 2}, rng);
    a.set_requires_grad(true);
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(sum(matmul(a, b)));
    }
    auto loss = [&]() { return run_loss<double>([&]() { return matmul(a, b); }); };
    for (Index i = 0; i < a.size(); ++i) {
        const double fd = fd_central<double>(loss, a, i, 1e-3);
        CHECK(rel_err(a.grad()[static_cast<std::size_t>(i)], fd) < 1e-4);
    }
}

TEST_CASE("conv2d 1x1 identity kernel") {
    Xoshiro256ss rng(2);
    auto x = random_tensor<float>(Shape{1, 1, 3, 3}, rng);
    Tensor<float> k(Shape{1, 1, 1, 1}, {1.0f});
    Tensor<float> y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (Index i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv2d all-ones 3x3 on all-ones image sums to 9") {
    Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
    Tensor<float> k(Shape{1, 1, 3, 3}, 1.0f);
    Tensor<float> y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == doctest::Approx(9.0f));
}

TEST_CASE("conv2d rejects kernel larger than padded input") {
    Tensor<float> x(Shape{1, 1, 2, 2});
    Tensor<float> k(Shape{1, 1, 5, 5});
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), ShapeError);
}

TEST_CASE("conv2d stride 1 pad k/2 preserves spatial dims for odd k") {
    Xoshiro256ss rng(3);
    for (Index k : {1, 3, 5}) {
        auto x = random_tensor<float>(Shape{2, 2, 8, 8}, rng);
        auto kern = random_tensor<float>(Shape{3, 2, k, k}, rng);
        Tensor<float> y = conv2d(x, kern, 1, k / 2);
        CHECK(y.shape() == Shape{2, 3, 8, 8});
    }
}

TEST_CASE("conv2d gradient vs finite differences") {
    Xoshiro256ss rng(4);
    auto x = random_tensor<double>(Shape{2, 3, 8, 8}, rng);
    auto k = random_tensor<double>(Shape{4, 3, 3, 3}, rng);
    auto bias = random_tensor<double>(Shape{4}, rng);
    x.set_requires_grad(true);
    k.set_requires_grad(true);
    bias.set_requires_grad(true);
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(sum(conv2d(x, k, bias, 2, 1)));
    }
    auto loss = [&]() { return run_loss<double>([&]() { return conv2d(x, k, bias, 2, 1); }); };
    Xoshiro256ss pick(5);
    for (int t = 0; t < 30; ++t) {
        Index i = static_cast<Index>(pick.below(static_cast<std::uint64_t>(x.size())));
        CHECK(rel_err(x.grad()[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3)) < 1e-4);
        Index j = static_cast<Index>(pick.below(static_cast<std::uint64_t>(k.size())));
        CHECK(rel_err(k.grad()[static_cast<std::size_t>(j)], fd_central<double>(loss, k, j, 1e-3)) < 1e-4);
    }
    CHECK(rel_err(bias.grad()[0], fd_central<double>(loss, bias, 0, 1e-3)) < 1e-4);
}

TEST_CASE("maxpool2d basics and hand enumeration") {
    Tensor<float> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> y = maxpool2d(x, 2, 2);
    CHECK(y.size() == 1);
    CHECK(y[0] == 4.0f);

    std::vector<float> ramp(16);
    std::iota(ramp.begin(), ramp.end(), 0.0f);
    Tensor<float> r(Shape{1, 1, 4, 4}, ramp);
    Tensor<float> p = maxpool2d(r, 2, 2);
    CHECK(p.values() == std::vector<float>{5, 7, 13, 15});
}

TEST_CASE("maxpool2d ties route gradient to first element row-major") {
    Tensor<float> x(Shape{1, 1, 4, 4}, 1.0f);
    x.set_requires_grad(true);
    Tape<float> tape;
    {
        TapeScope<float> scope(tape);
        backward(sum(maxpool2d(x, 2, 2)));
    }
    const auto& g = x.grad();
    // first element of each 2x2 window: (0,0), (0,2), (2,0), (2,2)
    for (Index y = 0; y < 4; ++y)
        for (Index c = 0; c < 4; ++c)
            CHECK(g[static_cast<std::size_t>(y * 4 + c)] ==
                  ((y % 2 == 0 && c % 2 == 0) ? 1.0f : 0.0f));
}

TEST_CASE("maxpool2d rejects oversized window") {
    Tensor<float> x(Shape{1, 1, 2, 2});
    CHECK_THROWS_AS(maxpool2d(x, 3, 1), ShapeError);
}

TEST_CASE("silu point values and gradient at zero") {
    Tensor<double> x(Shape{2}, {0.0, 1.0});
    Tensor<double> y = silu(x);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == doctest::Approx(0.7310585786300049).epsilon(1e-9));

    Tensor<double> z(Shape{1}, {0.0});
    z.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        backward(sum(silu(z)));
    }
    CHECK(z.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax symmetry, reference row, and row-sum property") {
    Tensor<double> x(Shape{1, 2}, {0.0, 0.0});
    Tensor<double> y = softmax_rows(x);
    CHECK(y[0] == doctest::Approx(0.5));
    CHECK(y[1] == doctest::Approx(0.5));

    Tensor<double> v(Shape{1, 3}, {1.0, 2.0, 3.0});
    Tensor<double> s = softmax_rows(v);
    CHECK(s[0] == doctest::Approx(0.0900305731703805).epsilon(1e-9));
    CHECK(s[1] == doctest::Approx(0.2447284710547976).epsilon(1e-9));
    CHECK(s[2] == doctest::Approx(0.6652409557748219).epsilon(1e-9));

    // strict open-interval membership holds while the logit gap stays inside
    // the dtype's exp range; beyond that the tiny terms round away
    Xoshiro256ss rng(6);
    for (int t = 0; t < 100; ++t) {
        auto r = random_tensor<double>(Shape{4, 5}, rng, -15, 15);
        Tensor<double> p = softmax_rows(r);
        for (Index b = 0; b < 4; ++b) {
            double row = 0;
            for (Index c = 0; c < 5; ++c) {
                CHECK(p[b * 5 + c] > 0.0);
                CHECK(p[b * 5 + c] < 1.0);
                row += p[b * 5 + c];
            }
            CHECK(std::abs(row - 1.0) < 1e-6);
        }
        auto rf = random_tensor<float>(Shape{4, 5}, rng, -7, 7);
        Tensor<float> pf = softmax_rows(rf);
        for (Index b = 0; b < 4; ++b) {
            double row = 0;
            for (Index c = 0; c < 5; ++c) {
                CHECK(pf[b * 5 + c] > 0.0f);
                CHECK(pf[b * 5 + c] < 1.0f);
                row += pf[b * 5 + c];
            }
            CHECK(std::abs(row - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("layer_norm of a constant vector is zero before affine") {
    Tensor<float> x(Shape{3, 8}, 4.25f);
    Tensor<float> y = layer_norm(x);
    for (Index i = 0; i < y.size(); ++i) CHECK(std::abs(y[i]) < 1e-6f);
}

TEST_CASE("batch_norm training requires batch of at least two") {
    Tensor<float> x(Shape{1, 4});
    Tensor<float> g(Shape{4}, 1.0f), b(Shape{4}), rm(Shape{4}), rv(Shape{4}, 1.0f);
    CHECK_THROWS_AS(batch_norm(x, g, b, rm, rv, true), ContractError);
    CHECK_NOTHROW(batch_norm(x, g, b, rm, rv, false));
}

TEST_CASE("batch_norm running statistics drive inference") {
    Xoshiro256ss rng(7);
    auto x = random_tensor<float>(Shape{16, 3}, rng, 2.0, 4.0);
    Tensor<float> g(Shape{3}, 1.0f), b(Shape{3}), rm(Shape{3}), rv(Shape{3}, 1.0f);
    for (int i = 0; i < 200; ++i) batch_norm(x, g, b, rm, rv, true);
    Tensor<float> y = batch_norm(x, g, b, rm, rv, false);
    double mean = 0;
    for (Index i = 0; i < y.size(); ++i) mean += y[i];
    mean /= static_cast<double>(y.size());
    CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("cross_entropy uniform, stability, and gradient form") {
    Tensor<double> l0(Shape{1, 2}, {0.0, 0.0});
    CHECK(cross_entropy(l0, {0}).item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

    Tensor<double> big(Shape{1, 2}, {1000.0, 0.0});
    const double v = cross_entropy(big, {0}).item();
    CHECK(std::isfinite(v));
    CHECK(v < 1e-9);

    Xoshiro256ss rng(8);
    auto logits = random_tensor<double>(Shape{3, 4}, rng);
    std::vector<int> labels{1, 0, 3};
    logits.set_requires_grad(true);
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(cross_entropy(logits, labels));
    }
    Tensor<double> probs = softmax_rows(logits.detach());
    for (Index b = 0; b < 3; ++b)
        for (Index c = 0; c < 4; ++c) {
            const double expect =
                (probs[b * 4 + c] - (labels[static_cast<std::size_t>(b)] == c ? 1.0 : 0.0)) / 3.0;
            CHECK(rel_err(logits.grad()[static_cast<std::size_t>(b * 4 + c)], expect) < 1e-10);
        }
    auto loss = [&]() { return static_cast<double>(cross_entropy(logits, labels).item()); };
    for (Index i = 0; i < logits.size(); ++i)
        CHECK(rel_err(logits.grad()[static_cast<std::size_t>(i)],
                      fd_central<double>(loss, logits, i, 1e-3)) < 1e-4);
}

TEST_CASE("cross_entropy rejects out-of-range labels") {
    Tensor<float> logits(Shape{1, 3});
    CHECK_THROWS_AS(cross_entropy(logits, {3}), IndexError);
    CHECK_THROWS_AS(cross_entropy(logits, {-1}), IndexError);
}

TEST_CASE("backward computes d(x^2)/dx and accumulates shared uses") {
    Tensor<double> x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        backward(mul(x, x));
    }
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    Tensor<double> z = Tensor<double>::scalar(1.5);
    z.set_requires_grad(true);
    Tape<double> tape2;
    {
        TapeScope<double> scope(tape2);
        backward(add(z, z));
    }
    CHECK(z.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar losses and missing tapes") {
    Tensor<float> x(Shape{2}, {1.0f, 2.0f});
    Tape<float> tape;
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    CHECK_THROWS_AS(backward(Tensor<float>::scalar(1.0f)), ContractError);
}

TEST_CASE("seeded forward+backward replays bitwise identically") {
    auto run = [](std::uint64_t seed) {
        Xoshiro256ss rng(seed);
        auto x = random_tensor<float>(Shape{4, 6}, rng);
        auto w = random_tensor<float>(Shape{3, 6}, rng);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        Tape<float> tape;
        {
            TapeScope<float> scope(tape);
            backward(cross_entropy(linear(silu(x), w), {0, 1, 2, 0}));
        }
        std::vector<float> out = w.grad();
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    CHECK(run(99) == run(99));
}

// Every differentiable op agrees with central differences (64-bit, step 1e-3)
// on random small instances. Inputs keep a margin from relu/maxpool kinks so
// the secant actually estimates the derivative.
TEST_CASE("finite-difference sweep across ops") {
    Xoshiro256ss rng(10);
    int instances = 0;
    for (int round = 0; round < 10; ++round) {
        // silu on [-2, 2]
        {
            auto x = random_tensor<double>(Shape{3, 4}, rng, -2, 2);
            std::vector<double> w(12);
            for (auto& v : w) v = rng.uniform(-1, 1);
            auto op = [](Tensor<double>& t) { return silu(t); };
            auto g = weighted_sum_grad<double>(op, x, w);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, w); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3)) < 1e-4);
            }
            ++instances;
        }
        // relu away from the kink
        {
            Tensor<double> x(Shape{3, 4});
            for (Index i = 0; i < x.size(); ++i) {
                double v = rng.uniform(0.05, 2.0);
                x[i] = rng.uniform() < 0.5 ? -v : v;
            }
            std::vector<double> w(12);
            for (auto& v : w) v = rng.uniform(-1, 1);
            auto op = [](Tensor<double>& t) { return relu(t); };
            auto g = weighted_sum_grad<double>(op, x, w);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, w); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3)) < 1e-4);
            }
            ++instances;
        }
        // softmax + layer_norm + linear chain
        {
            auto x = random_tensor<double>(Shape{2, 5}, rng, -2, 2);
            auto w = random_tensor<double>(Shape{3, 5}, rng);
            std::vector<double> wt(6);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [&w](Tensor<double>& t) { return linear(softmax_rows(layer_norm(t)), w); };
            auto g = weighted_sum_grad<double>(op, x, wt);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3), 1e-6) < 1e-4);
            }
            ++instances;
        }
        // conv2d + maxpool with kink margins: weights positive, inputs spread
        {
            auto x = random_tensor<double>(Shape{1, 2, 6, 6}, rng, 0.2, 2.0);
            auto k = random_tensor<double>(Shape{2, 2, 3, 3}, rng, 0.1, 0.5);
            std::vector<double> wt(2 * 2 * 2);
            for (auto& v : wt) v = rng.uniform(0.2, 1.0);
            auto op = [&k](Tensor<double>& t) { return maxpool2d(conv2d(t, k, 1, 0), 2, 2); };
            auto g = weighted_sum_grad<double>(op, x, wt);
            Xoshiro256ss pick(rng.next());
            for (int t = 0; t < 12; ++t) {
                Index i = static_cast<Index>(pick.below(static_cast<std::uint64_t>(x.size())));
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(grad_close(g[static_cast<std::size_t>(i)],
                                 fd_central<double>(loss, x, i, 1e-3), 1e-4, 1e-7));
            }
            ++instances;
        }
        // batch_norm training mode
        {
            auto x = random_tensor<double>(Shape{6, 3}, rng, -2, 2);
            Tensor<double> gamma(Shape{3}, 1.3);
            Tensor<double> beta(Shape{3}, 0.2);
            std::vector<double> wt(18);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [&](Tensor<double>& t) {
                Tensor<double> rm(Shape{3}), rv(Shape{3}, 1.0);
                return batch_norm(t, gamma, beta, rm, rv, true);
            };
            auto g = weighted_sum_grad<double>(op, x, wt);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(grad_close(g[static_cast<std::size_t>(i)],
                                 fd_central<double>(loss, x, i, 1e-3), 1e-4, 1e-7));
            }
            ++instances;
        }
        // reductions and structure ops
        {
            auto x = random_tensor<double>(Shape{4, 3}, rng, -2, 2);
            std::vector<double> wt(12);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [](Tensor<double>& t) {
                return concat_cols(reshape(t, Shape{3, 4}), reshape(mul(t, t), Shape{3, 4}));
            };
            std::vector<double> w2(24);
            for (auto& v : w2) v = rng.uniform(-1, 1);
            auto g = weighted_sum_grad<double>(op, x, w2);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, w2); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3)) < 1e-4);
            }
            ++instances;
        }
        // row-broadcast ops feeding a smooth nonlinearity
        {
            auto x = random_tensor<double>(Shape{3, 4}, rng, -2, 2);
            auto t = random_tensor<double>(Shape{4}, rng, -0.5, 0.5);
            auto s = random_tensor<double>(Shape{4}, rng, 0.5, 2.0);
            std::vector<double> wt(12);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [&](Tensor<double>& in) { return silu(div_rowvec(sub_rowvec(in, t), s)); };
            auto g = weighted_sum_grad<double>(op, x, wt);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3)) < 1e-4);
            }
            ++instances;
        }
        // softplus gate through scale_by
        {
            auto x = random_tensor<double>(Shape{2, 3}, rng, -2, 2);
            std::vector<double> wt(6);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [](Tensor<double>& in) {
                return scale_by(in, take(softplus_shift(in, 1e-3), 0));
            };
            auto g = weighted_sum_grad<double>(op, x, wt);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3), 1e-6) < 1e-4);
            }
            ++instances;
        }
        // scale_last_dim both operands
        {
            auto t3 = random_tensor<double>(Shape{2, 3, 4}, rng);
            auto m2 = random_tensor<double>(Shape{2, 3}, rng);
            std::vector<double> wt(24);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [&m2](Tensor<double>& in) { return scale_last_dim(in, m2); };
            auto g = weighted_sum_grad<double>(op, t3, wt);
            for (Index i = 0; i < t3.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, t3, wt); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, t3, i, 1e-3)) < 1e-4);
            }
            ++instances;
        }
        // layer_norm with affine parameters
        {
            auto x = random_tensor<double>(Shape{3, 5}, rng, -2, 2);
            auto gamma = random_tensor<double>(Shape{5}, rng, 0.5, 1.5);
            auto beta = random_tensor<double>(Shape{5}, rng, -0.5, 0.5);
            std::vector<double> wt(15);
            for (auto& v : wt) v = rng.uniform(-1, 1);
            auto op = [&](Tensor<double>& in) { return layer_norm(in, gamma, beta); };
            auto g = weighted_sum_grad<double>(op, x, wt);
            for (Index i = 0; i < x.size(); ++i) {
                auto loss = [&]() { return weighted_sum_value<double>(op, x, wt); };
                CHECK(rel_err(g[static_cast<std::size_t>(i)], fd_central<double>(loss, x, i, 1e-3), 1e-6) < 1e-4);
            }
            ++instances;
        }
    }
    CHECK(instances >= 100);
}
