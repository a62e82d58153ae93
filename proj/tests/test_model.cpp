// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "csfl/model.hpp"
#include "csfl/rng.hpp"
#include "test_support.hpp"

using namespace csfl;
using csfl::testing::param_refs;
using csfl::testing::random_arch;
using csfl::testing::random_batch;

namespace {

// Minimal stack whose output layer is a 1x1 identity dense layer: encoder
// (width 3), hidden 3->1, output 1->1.
ArchSpec tiny_arch() {
    ArchSpec a;
    a.num_numeric = 1;
    a.vocab1 = 1;
    a.vocab2 = 1;
    a.wide_out = 1;
    a.embed_dim1 = 1;
    a.embed_dim2 = 1;
    a.client_hidden = {1};
    a.server_hidden = {};
    a.output_dim = 1;
    a.split_layer_index = 2;
    return a;
}

Matrix scalar_matrix(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
}

}  // namespace

TEST_CASE("init_params is deterministic and seed-sensitive") {
    const ArchSpec arch;  // defaults
    const SplitModelParams a = init_params(arch, 42);
    const SplitModelParams b = init_params(arch, 42);
    CHECK(a == b);

    for (double v : a.encoder.wide_bias) CHECK(v == 0.0);
    for (const auto& layer : a.dense) {
        for (double v : layer.bias) CHECK(v == 0.0);
    }

    const SplitModelParams c = init_params(arch, 43);
    CHECK_FALSE(a == c);
}

TEST_CASE("init_params rejects invalid architectures") {
    ArchSpec arch;
    arch.wide_out = 0;
    CHECK_THROWS_AS(init_params(arch, 1), ConfigError);

    ArchSpec bad_split;
    bad_split.split_layer_index = bad_split.total_layers();
    CHECK_THROWS_AS(init_params(bad_split, 1), ConfigError);
}

TEST_CASE("forward_range: single dense identity layer computes 2*3+1") {
    const ArchSpec arch = tiny_arch();
    SplitModelParams p = init_params(arch, 7);
    // Output layer (index 3) is 1->1 with identity activation.
    p.dense[1].weights = scalar_matrix(2.0);
    p.dense[1].bias = {1.0};
    const Activation in{scalar_matrix(3.0), 2};
    const Activation out = forward_range(p, 3, 3, in);
    CHECK(out.values(0, 0) == doctest::Approx(7.0).epsilon(1e-15));
    CHECK(out.produced_after_layer == 3);
}

TEST_CASE("forward_range: zero weights over dense range give zero activation") {
    Rng rng(11);
    const ArchSpec arch = random_arch(rng);
    SplitModelParams p = init_params(arch, 3);
    for (auto& d : p.dense) {
        for (double& v : d.weights.data) v = 0.0;
        for (double& v : d.bias) v = 0.0;
    }
    const int n = arch.total_layers();
    Matrix input(2, static_cast<std::size_t>(arch.layer_input_width(2)), 0.5);
    const Activation out = forward_range(p, 2, n, Activation{input, 1});
    for (double v : out.values.data) CHECK(v == 0.0);
}

TEST_CASE("forward_range composition equals the monolithic pass") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const ArchSpec arch = random_arch(rng);
        const SplitModelParams p = init_params(arch, rng.next_u64());
        const std::size_t batch = 1 + rng.uniform_int(7);
        const RawBatch raw = random_batch(rng, arch, batch);
        const int n = arch.total_layers();
        const int cut = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));

        const Activation full = forward_range(p, 1, n, raw);
        const Activation head = forward_range(p, 1, cut, raw);
        const Activation tail = forward_range(p, cut + 1, n, head);
        REQUIRE(tail.values.same_shape(full.values));
        for (std::size_t i = 0; i < full.values.data.size(); ++i) {
            CHECK(std::fabs(tail.values.data[i] - full.values.data[i]) <= 1e-12);
        }
    }
}

TEST_CASE("forward_range is pure: repeated calls are bit-identical") {
    Rng rng(5);
    const ArchSpec arch = random_arch(rng);
    const SplitModelParams p = init_params(arch, 9);
    const RawBatch raw = random_batch(rng, arch, 4);
    const Activation a = forward_range(p, 1, arch.total_layers(), raw);
    const Activation b = forward_range(p, 1, arch.total_layers(), raw);
    CHECK(a.values == b.values);
}

TEST_CASE("forward_range input validation") {
    const ArchSpec arch = tiny_arch();
    const SplitModelParams p = init_params(arch, 1);

    SUBCASE("from > to") {
        const Activation in{scalar_matrix(1.0), 2};
        CHECK_THROWS_AS(forward_range(p, 3, 2, in), ContractError);
    }
    SUBCASE("wrong activation provenance") {
        const Activation in{scalar_matrix(1.0), 1};
        CHECK_THROWS_AS(forward_range(p, 3, 3, in), ContractError);
    }
    SUBCASE("shape mismatch") {
        Matrix wide(1, 5, 0.0);
        CHECK_THROWS_AS(forward_range(p, 3, 3, Activation{wide, 2}), DimensionError);
    }
    SUBCASE("non-finite input") {
        Matrix bad(1, 1);
        bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(forward_range(p, 3, 3, Activation{bad, 2}), NumericError);
    }
}

TEST_CASE("backward_range: analytic single linear layer") {
    const ArchSpec arch = tiny_arch();
    SplitModelParams p = init_params(arch, 7);
    p.dense[1].weights = scalar_matrix(2.0);
    p.dense[1].bias = {1.0};
    const Activation in{scalar_matrix(3.0), 2};
    const ForwardTrace trace = forward_range_traced(p, 3, 3, in);
    const GradientBundle g = backward_range(p, 3, 3, trace, scalar_matrix(1.0));
    CHECK(g.dense.size() == 1);
    CHECK(g.dense[0].weights(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(g.dense[0].bias[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(g.input_gradient(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("backward_range: zero upstream gradient gives zero bundle") {
    Rng rng(17);
    const ArchSpec arch = random_arch(rng);
    const SplitModelParams p = init_params(arch, 23);
    const RawBatch raw = random_batch(rng, arch, 3);
    const int n = arch.total_layers();
    const ForwardTrace trace = forward_range_traced(p, 1, n, raw);
    const Matrix zeros(trace.output.rows, trace.output.cols, 0.0);
    const GradientBundle g = backward_range(p, 1, n, trace, zeros);

    std::vector<double> flat(param_count(arch, 1, n), 0.0);
    accumulate_flat_gradient(arch, 1, n, g, flat);
    for (double v : flat) CHECK(v == 0.0);
    for (double v : g.input_gradient.data) CHECK(v == 0.0);
}

TEST_CASE("backward_range rejects mismatched cached state") {
    const ArchSpec arch = tiny_arch();
    const SplitModelParams p = init_params(arch, 7);
    const Activation in{scalar_matrix(3.0), 2};
    const ForwardTrace trace = forward_range_traced(p, 3, 3, in);
    CHECK_THROWS_AS(backward_range(p, 2, 3, trace, scalar_matrix(1.0)), ContractError);
    Matrix wrong(2, 1, 0.0);
    CHECK_THROWS_AS(backward_range(p, 3, 3, trace, wrong), DimensionError);
}

TEST_CASE("backward_range matches central finite differences") {
    Rng rng(31337);
    const double h = 1e-5;
    // Central differences are only valid away from ReLU kinks: skip sampled
    // nets whose pre-activations come within 1e-3 of zero.
    const double kink_margin = 1e-3;
    int checked_nets = 0;
    for (int trial = 0; checked_nets < 10; ++trial) {
        REQUIRE(trial < 200);
        ArchSpec arch = random_arch(rng);
        const std::uint64_t seed = rng.next_u64();
        const std::size_t batch = 1 + rng.uniform_int(3);
        const RawBatch raw = random_batch(rng, arch, batch);
        const int n = arch.total_layers();
        if (param_count(arch, 1, n) > 200) continue;

        SplitModelParams p = init_params(arch, seed);
        Matrix upstream(batch, static_cast<std::size_t>(arch.output_dim));
        for (double& v : upstream.data) v = rng.normal();

        const ForwardTrace trace = forward_range_traced(p, 1, n, raw);
        bool near_kink = false;
        for (std::size_t layer = 0; layer + 1 < trace.dense_pre.size() && !near_kink; ++layer) {
            for (double z : trace.dense_pre[layer].data) {
                if (std::fabs(z) < kink_margin) {
                    near_kink = true;
                    break;
                }
            }
        }
        if (near_kink) continue;
        ++checked_nets;
        const GradientBundle bundle = backward_range(p, 1, n, trace, upstream);
        std::vector<double> analytic(param_count(arch, 1, n), 0.0);
        accumulate_flat_gradient(arch, 1, n, bundle, analytic);

        // J(theta) = sum(upstream . forward(theta)); dJ/dtheta is the bundle.
        auto objective = [&]() {
            const Activation out = forward_range(p, 1, n, raw);
            double j = 0.0;
            for (std::size_t i = 0; i < out.values.data.size(); ++i) {
                j += upstream.data[i] * out.values.data[i];
            }
            return j;
        };

        std::vector<double*> refs = param_refs(p, 1, n);
        REQUIRE(refs.size() == analytic.size());
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const double saved = *refs[i];
            *refs[i] = saved + h;
            const double j_plus = objective();
            *refs[i] = saved - h;
            const double j_minus = objective();
            *refs[i] = saved;
            const double numeric = (j_plus - j_minus) / (2.0 * h);
            const double scale = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-6});
            CHECK(std::fabs(analytic[i] - numeric) / scale < 1e-4);
        }
    }
}

TEST_CASE("mse_loss_and_grad") {
    SUBCASE("zero residual") {
        Matrix pred(2, 1);
        pred(0, 0) = 1.0;
        pred(1, 0) = 2.0;
        const auto [loss, grad] = mse_loss_and_grad(pred, pred);
        CHECK(loss == 0.0);
        for (double v : grad.data) CHECK(v == 0.0);
    }
    SUBCASE("analytic single element") {
        const auto [loss, grad] = mse_loss_and_grad(scalar_matrix(3.0), scalar_matrix(1.0));
        CHECK(loss == doctest::Approx(4.0).epsilon(1e-15));
        CHECK(grad(0, 0) == doctest::Approx(4.0).epsilon(1e-15));
    }
    SUBCASE("random vectors against scalar recomputation") {
        Rng rng(77);
        Matrix pred(8, 1), target(8, 1);
        for (double& v : pred.data) v = rng.normal();
        for (double& v : target.data) v = rng.normal();
        const auto [loss, grad] = mse_loss_and_grad(pred, target);
        double expect = 0.0;
        for (std::size_t i = 0; i < 8; ++i) {
            const double r = pred.data[i] - target.data[i];
            expect += r * r;
        }
        expect /= 8.0;
        CHECK(loss == doctest::Approx(expect).epsilon(1e-14));
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(grad.data[i] ==
                  doctest::Approx(2.0 * (pred.data[i] - target.data[i]) / 8.0).epsilon(1e-14));
        }
    }
    SUBCASE("shape mismatch") {
        Matrix a(2, 1), b(3, 1);
        CHECK_THROWS_AS(mse_loss_and_grad(a, b), DimensionError);
    }
    SUBCASE("empty batch") {
        Matrix empty(0, 1);
        CHECK_THROWS_AS(mse_loss_and_grad(empty, empty), ContractError);
        CHECK_THROWS_AS(mae(empty, empty), ContractError);
    }
}

TEST_CASE("mae") {
    Matrix pred(2, 1), target(2, 1);
    pred(0, 0) = 3.0;
    pred(1, 0) = -1.0;
    target(0, 0) = 3.0;
    target(1, 0) = -1.0;
    CHECK(mae(pred, target) == 0.0);

    CHECK(mae(scalar_matrix(3.0), scalar_matrix(1.0)) == doctest::Approx(2.0).epsilon(1e-15));

    Rng rng(99);
    Matrix p(16, 1), t(16, 1);
    for (double& v : p.data) v = rng.normal();
    for (double& v : t.data) v = rng.normal();
    double expect = 0.0;
    for (std::size_t i = 0; i < 16; ++i) expect += std::fabs(p.data[i] - t.data[i]);
    expect /= 16.0;
    CHECK(mae(p, t) == doctest::Approx(expect).epsilon(1e-14));

    Matrix wrong(2, 2);
    CHECK_THROWS_AS(mae(p, wrong), DimensionError);
}

TEST_CASE("sgd_step") {
    const ArchSpec arch = tiny_arch();
    SplitModelParams p = init_params(arch, 7);
    p.dense[1].weights = scalar_matrix(1.0);
    const Activation in{scalar_matrix(3.0), 2};
    const ForwardTrace trace = forward_range_traced(p, 3, 3, in);
    GradientBundle g = backward_range(p, 3, 3, trace, scalar_matrix(1.0));

    SUBCASE("w=1, g=0.5, lr=0.1 -> 0.95") {
        g.dense[0].weights = scalar_matrix(0.5);
        g.dense[0].bias = {0.0};
        const SplitModelParams next = sgd_step(p, g, 0.1);
        CHECK(next.dense[1].weights(0, 0) == doctest::Approx(0.95).epsilon(1e-15));
    }
    SUBCASE("zero gradient is the identity") {
        g.dense[0].weights = scalar_matrix(0.0);
        g.dense[0].bias = {0.0};
        const SplitModelParams next = sgd_step(p, g, 0.1);
        CHECK(next == p);
    }
    SUBCASE("two half-lr steps equal one full step under a constant gradient") {
        g.dense[0].weights = scalar_matrix(0.5);
        g.dense[0].bias = {0.25};
        const SplitModelParams two = sgd_step(sgd_step(p, g, 0.05), g, 0.05);
        const SplitModelParams one = sgd_step(p, g, 0.1);
        CHECK(two.dense[1].weights(0, 0) ==
              doctest::Approx(one.dense[1].weights(0, 0)).epsilon(1e-12));
        CHECK(two.dense[1].bias[0] == doctest::Approx(one.dense[1].bias[0]).epsilon(1e-12));
    }
    SUBCASE("untouched layers stay bit-identical") {
        const SplitModelParams next = sgd_step(p, g, 0.1);
        CHECK(next.encoder == p.encoder);
        CHECK(next.dense[0] == p.dense[0]);
    }
}

TEST_CASE("zero-loss fixed point: pred == target leaves parameters unchanged") {
    Rng rng(123);
    const ArchSpec arch = random_arch(rng);
    const SplitModelParams p = init_params(arch, 55);
    const RawBatch raw = random_batch(rng, arch, 4);
    const int n = arch.total_layers();
    const ForwardTrace trace = forward_range_traced(p, 1, n, raw);
    const auto [loss, grad] = mse_loss_and_grad(trace.output, trace.output);
    CHECK(loss == 0.0);
    const GradientBundle bundle = backward_range(p, 1, n, trace, grad);
    const SplitModelParams next = sgd_step(p, bundle, 0.1);
    CHECK(next == p);
}
