// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "finermoe/loss_grad.hpp"
#include "finermoe/upcycle.hpp"
#include "test_support.hpp"

namespace finermoe {
namespace {

using testing::scrambled_model;
using testing::tiny_config;

TEST(BalanceLoss, UniformBalancedFixture) {
    // Uniform scores over N = 4; ties would send every token to expert 0, so
    // the balanced assignment (token t -> expert t) is set by hand.
    const auto cfg = tiny_config(4, 1, 1, 1, 1);
    MatrixD s(4, 4, 0.25);
    auto d = route(s, cfg);
    std::fill(d.final_mask.begin(), d.final_mask.end(), 0);
    for (std::size_t t = 0; t < 4; ++t) d.final_mask[t * 4 + t] = 1;
    const auto r = balance_loss(d);
    for (double f : r.f) EXPECT_EQ(f, 1.0);
    EXPECT_NEAR(r.loss, 0.001, 1e-9);
    EXPECT_NEAR(std::accumulate(r.P.begin(), r.P.end(), 0.0), 1.0, 1e-12);
}

TEST(BalanceLoss, AllToOneFixture) {
    const auto cfg = tiny_config(8, 1, 1, 1, 1);
    MatrixD s(5, 8, 0.0);
    for (std::size_t t = 0; t < 5; ++t) s(t, 0) = 1.0;
    const auto r = balance_loss(route(s, cfg));
    EXPECT_EQ(r.f[0], 8.0);
    EXPECT_EQ(r.P[0], 1.0);
    EXPECT_EQ(r.loss, kBalanceAlpha * 8.0);
}

TEST(BalanceLoss, SingleTokenIndicatorValues) {
    Rng rng(1);
    const auto cfg = tiny_config(2, 2, 2, 2, 2);
    const auto d = route(testing::random_scores<float>(1, 16, rng), cfg);
    const auto r = balance_loss(d);
    for (double f : r.f) EXPECT_TRUE(f == 0.0 || f == 16.0 / 4.0);
}

TEST(BalanceLoss, LoadFactorsSumToN) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const auto cfg = tiny_config(1 + rng.below(4), 1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3), 1);
        const auto N = derive(cfg).N;
        const std::size_t L = 1 + rng.below(20);
        const auto r = balance_loss(route(testing::random_scores<double>(L, N, rng), cfg));
        EXPECT_NEAR(std::accumulate(r.f.begin(), r.f.end(), 0.0), static_cast<double>(N), 1e-9);
        EXPECT_NEAR(std::accumulate(r.P.begin(), r.P.end(), 0.0), 1.0, 1e-9);
        EXPECT_GE(r.loss, 0.0);
    }
}

TEST(BalanceLoss, EmptyDecision) {
    const auto d = route(MatrixF(0, 2), tiny_config(1, 1, 1, 2, 1));
    try {
        balance_loss(d);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::empty_input);
    }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(3);
    const auto cfg = tiny_config(2, 1, 2, 2, 1, 4, 8);
    const auto m = scrambled_model<double>(cfg, 3);
    const auto x = random_normal<double>(3, 4, rng);
    const auto g = backward(x, m, MatrixD(3, 4), route_tokens(x, m));
    EXPECT_EQ(g.params, zero_gradients_like(m, 3).params);
    EXPECT_EQ(g.dx, MatrixD(3, 4));
}

TEST(Backward, SingleExpertDownProjectionByHand) {
    Rng rng(4);
    const auto cfg = tiny_config(2, 1, 2, 2, 1, 4, 8);
    const auto m = scrambled_model<double>(cfg, 4);
    const auto x = random_normal<double>(1, 4, rng);
    const auto d = route_tokens(x, m);
    const auto up = random_normal<double>(1, 4, rng);
    const auto g = backward(x, m, up, d);
    for (std::size_t s = 0; s < 2; ++s) {
        const std::size_t k = d.index(0, s);
        SwigluTrace<double> trace;
        swiglu_forward(x, m.experts[k], &trace);
        const std::size_t c = component_of(k, cfg);
        // dW2 = hidden^T (upstream slice) * weight
        MatrixD slice = up.col_block(c * 2, c * 2 + 2);
        slice *= d.prob(0, s);
        const auto expected = matmul(trace.hidden.transposed(), slice);
        EXPECT_LT(max_relative_error(g.params.experts[k].w2, expected), 1e-14);
    }
}

TEST(Backward, InactiveExpertsGetZeroGradient) {
    Rng rng(5);
    const auto cfg = tiny_config(2, 2, 2, 3, 1, 4, 4);
    const auto m = scrambled_model<double>(cfg, 5);
    const auto x = random_normal<double>(2, 4, rng);
    const auto d = route_tokens(x, m);
    const auto g = backward(x, m, random_normal<double>(2, 4, rng), d);
    const auto zero = zero_ffn<double, ExpertTag>(4, 2, 2);
    for (std::size_t k = 0; k < derive(cfg).N; ++k) {
        const bool used = d.active(0, k) || d.active(1, k);
        if (!used) EXPECT_EQ(g.params.experts[k], zero) << k;
        else EXPECT_NE(g.params.experts[k], zero) << k;
    }
}

TEST(FiniteDifference, QuadraticSelfTest) {
    double x = 1.7;
    const double fd = central_difference(x, 1e-6, [&] { return 3.0 * x * x - 2.0 * x; });
    EXPECT_LT(relative_error(6.0 * 1.7 - 2.0, fd), 1e-9);
    EXPECT_EQ(x, 1.7);
}

TEST(FiniteDifference, ToyLayerMeanSquare) {
    Rng rng(6);
    // G_I = 32 needs H to be a multiple of 32; H = 64 gives H_e = 2.
    const auto cfg = baseline_preset("FineRMoE-base", 8, 64);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = scrambled_model<double>(cfg, 60 + seed);
        const auto x = random_normal<double>(4, 8, rng);
        FdOptions opt;
        opt.seed = seed;
        const auto r = fd_check(x, m, LayerLoss{1.0, 0.0}, opt);
        EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
        EXPECT_GT(r.checked, 0u);
    }
}

TEST(FiniteDifference, VariantsAndBalanceLoss) {
    Rng rng(7);
    auto cfg = tiny_config(2, 1, 2, 2, 1, 4, 8);
    cfg.concat_proj = true;
    cfg.router_mode = RouterMode::separate;
    auto m = scrambled_model<double>(cfg, 7);
    for (auto& v : m.concat_proj->values()) v += rng.normal(0.0, 0.2);
    const auto x = random_normal<double>(3, 4, rng);
    const auto r = fd_check(x, m, LayerLoss{1.0, kBalanceAlpha});
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(FiniteDifference, BalanceGradientWrtLogits) {
    // Loss as a function of the logits with the routing (hence f) held fixed.
    Rng rng(8);
    const auto cfg = tiny_config(2, 2, 2, 2, 1);
    MatrixD logits = random_normal<double>(5, 16, rng, 1.5);
    const auto d0 = route(softmax_rows(logits), cfg);
    const auto f = balance_loss(d0).f;
    auto loss = [&] {
        const auto s = softmax_rows(logits);
        double sum = 0.0;
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t k = 0; k < 16; ++k) sum += f[k] * s(t, k) / 5.0;
        return kBalanceAlpha * sum;
    };
    const auto analytic = softmax_backward(d0.score, balance_loss_score_grad(d0));
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double numeric = central_difference(logits.values()[i], 1e-6, loss);
        worst = std::max(worst, relative_error(analytic.values()[i], numeric));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Training, SgdReducesLoss) {
    Rng rng(9);
    const auto cfg = tiny_config(2, 1, 2, 2, 1, 4, 8);
    auto m = scrambled_model<double>(cfg, 9);
    const auto x = random_normal<double>(16, 4, rng);
    const auto target = random_normal<double>(16, 4, rng);
    const LayerLoss loss{1.0, kBalanceAlpha};
    const double before = evaluate_loss(x, m, loss, &target).value;
    for (int step = 0; step < 30; ++step) sgd_step(m, loss_gradients(x, m, loss, &target), 0.05);
    EXPECT_LT(evaluate_loss(x, m, loss, &target).value, before);
}

}  // namespace
}  // namespace finermoe
