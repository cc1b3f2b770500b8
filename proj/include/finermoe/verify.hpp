// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites run by `finermoe check`. Each compares the layer against an
// independent reference and reports one metric with its threshold.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "finermoe/checkpoint.hpp"
#include "finermoe/config.hpp"
#include "finermoe/loss_grad.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/oracle.hpp"
#include "finermoe/router.hpp"
#include "finermoe/upcycle.hpp"

namespace finermoe::verify {

inline constexpr double kReconstructionTolerance = 1e-5;
inline constexpr double kGradientTolerance = 1e-4;
inline constexpr double kMinStableFraction = 0.95;

struct SuiteResult {
    std::string name;
    bool passed = false;
    double metric = 0.0;     ///< what was measured (error, mismatch count, ...)
    double threshold = 0.0;  ///< the bound it was held to
    std::string detail;
};

/// Forced sparse path of an upcycled model against the dense FFN, scaled by
/// R_I (each intermediate slice appears R_I times in candidate 0's group).
inline SuiteResult reconstruction(const FineRConfig& cfg, std::uint64_t seed, std::size_t inputs = 100) {
    Rng rng(seed);
    const auto dense = random_ffn<float, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.1);
    const MoEModel<float> model = upcycle(dense, cfg, seed);
    const Matrix<float> x = random_normal<float>(inputs, cfg.h, rng);
    Matrix<float> expected = oracle::dense_ffn_forward(x, dense);
    expected *= static_cast<float>(cfg.R_I);
    const double err = max_relative_error(forced_sparse_forward(x, model), expected);
    return {"reconstruction", err < kReconstructionTolerance, err, kReconstructionTolerance,
            std::to_string(inputs) + " inputs, R_I=" + std::to_string(cfg.R_I)};
}

/// route() against the enumeration reference on random score matrices.
inline SuiteResult router_equivalence(const FineRConfig& cfg, std::uint64_t seed, std::size_t trials = 1000) {
    Rng rng(seed);
    const DerivedDims d = derive(cfg);
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < trials; ++i) {
        const Matrix<float> s = softmax_rows(random_normal<float>(1, d.N, rng, 2.0));
        if (!(route(s, cfg) == oracle::route_reference(s, cfg))) ++mismatches;
    }
    return {"router-equivalence", mismatches == 0, static_cast<double>(mismatches), 0.0,
            std::to_string(trials) + " random score rows"};
}

/// FRM1 encode/decode is bit-exact and leaves forward outputs unchanged.
inline SuiteResult round_trip(const FineRConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const auto dense = random_ffn<float, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.1);
    const MoEModel<float> model = upcycle(dense, cfg, seed);
    const std::string bytes = encode_model(model);
    const AnyModel back = decode_model(bytes);
    const auto* moe = std::get_if<MoEModel<float>>(&back);
    bool ok = moe && *moe == model && encode_model(*moe) == bytes;
    if (ok) {
        const Matrix<float> x = random_normal<float>(8, cfg.h, rng);
        ok = forward(x, model).y == forward(x, *moe).y;
    }
    return {"round-trip", ok, ok ? 0.0 : 1.0, 0.0, std::to_string(bytes.size()) + " bytes"};
}

/// Analytic gradients of a double model vs central differences taken on a
/// long double copy, over `instances` random models built from cfg's ratios.
inline SuiteResult fd_gradient(const FineRConfig& cfg, std::uint64_t seed, std::size_t instances = 4,
                               std::size_t tokens = 4) {
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (std::size_t i = 0; i < instances; ++i) {
        Rng rng(seed + i);
        const auto dense = random_ffn<double, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.3);
        MoEModel<double> model = upcycle(dense, cfg, seed + i);
        // Perturb experts and router so replicas differ and scores are not flat.
        for (auto& e : model.experts)
            for (auto* m : {&e.w1, &e.wg, &e.w2})
                for (auto& v : m->values()) v += rng.normal(0.0, 0.05);
        for (auto& v : model.router.w.values()) v = rng.normal(0.0, 0.5);
        if (model.cc_router)
            for (auto& v : model.cc_router->w.values()) v = rng.normal(0.0, 0.5);
        const Matrix<double> x = random_normal<double>(tokens, cfg.h, rng);
        FdOptions opt;
        opt.seed = seed + i;
        const FdReport r = fd_check(x, model, LayerLoss{1.0, kBalanceAlpha}, opt);
        worst = std::max(worst, r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped;
    }
    const double stable = checked + skipped == 0 ? 0.0 : static_cast<double>(checked) / static_cast<double>(checked + skipped);
    const bool ok = worst < kGradientTolerance && stable >= kMinStableFraction;
    return {"fd-gradient", ok, worst, kGradientTolerance,
            std::to_string(checked) + " coordinates checked, stable fraction " + std::to_string(stable)};
}

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names = {"reconstruction", "router-equivalence", "round-trip", "fd-gradient"};
    return names;
}

inline SuiteResult run_suite(const std::string& name, const FineRConfig& cfg, std::uint64_t seed) {
    if (name == "reconstruction") return reconstruction(cfg, seed);
    if (name == "router-equivalence") return router_equivalence(cfg, seed);
    if (name == "round-trip") return round_trip(cfg, seed);
    if (name == "fd-gradient") return fd_gradient(cfg, seed);
    throw Error(ErrorCode::invalid_argument, "unknown suite '" + name + "'");
}

}  // namespace finermoe::verify
