// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force references used as ground truth by the test suites. Nothing here
// calls into the layer code; only the numeric primitives and plain data types
// are shared.

#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/routing.hpp"

namespace finermoe::oracle {

/// Full dense SwiGLU FFN. Loops run intermediate-unit-major with double
/// accumulators, unlike the blocked matmul used by the layer.
template <class T>
Matrix<T> dense_ffn_forward(const Matrix<T>& x, const DenseFfnWeights<T>& dense) {
    const std::size_t h = dense.w1.rows();
    const std::size_t H = dense.w1.cols();
    const std::size_t out_dim = dense.w2.cols();
    if (x.cols() != h || dense.wg.rows() != h || dense.wg.cols() != H || dense.w2.rows() != H) {
        throw Error(ErrorCode::shape_mismatch, "dense_ffn_forward: x " + x.shape_string() + ", w1 " +
                                                   dense.w1.shape_string() + ", w2 " + dense.w2.shape_string());
    }
    Matrix<T> y(x.rows(), out_dim);
    std::vector<double> acc(out_dim);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t u = 0; u < H; ++u) {
            double up = 0.0;
            double gate = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
                up += static_cast<double>(x(t, i)) * static_cast<double>(dense.w1(i, u));
                gate += static_cast<double>(x(t, i)) * static_cast<double>(dense.wg(i, u));
            }
            const double act = up * (gate / (1.0 + std::exp(-gate)));
            for (std::size_t o = 0; o < out_dim; ++o) acc[o] += act * static_cast<double>(dense.w2(u, o));
        }
        for (std::size_t o = 0; o < out_dim; ++o) y(t, o) = static_cast<T>(acc[o]);
    }
    return y;
}

/// Routing by explicit enumeration: full sorts per group, a linear scan per
/// output component, then a survivor count that must equal G_O * T_I.
template <class T>
RoutingDecision<T> route_reference(const Matrix<T>& score, const FineRConfig& cfg) {
    validate(cfg);
    const DerivedDims d = derive(cfg);
    if (score.cols() != d.N) throw Error(ErrorCode::shape_mismatch, "route_reference: score width != N");
    const std::size_t L = score.rows();

    RoutingDecision<T> r;
    r.tokens = L;
    r.cfg = cfg;
    r.dims = d;
    r.score = score;
    r.sum_mask.assign(L * d.N, 0);
    r.cc_score = Matrix<T>(L, d.n_groups);
    r.cc_act.assign(L * cfg.G_O, 0);
    r.cc_mask.assign(L * d.N, 0);
    r.final_mask.assign(L * d.N, 0);
    r.indices.clear();
    r.probs = Matrix<T>(L, d.n_active);

    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t g = 0; g < d.n_groups; ++g) {
            std::vector<std::pair<T, std::size_t>> members;
            T sum{0};
            for (std::size_t l = 0; l < d.group_size; ++l) {
                const T s = score(t, g * d.group_size + l);
                members.emplace_back(s, l);
                sum += s;
            }
            std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (std::size_t n = 0; n < cfg.T_I; ++n) r.sum_mask[t * d.N + g * d.group_size + members[n].second] = 1;
            r.cc_score(t, g) = sum;
        }
        for (std::size_t i = 0; i < cfg.G_O; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < cfg.R_O; ++j) {
                if (r.cc_score(t, i * cfg.R_O + j) > r.cc_score(t, i * cfg.R_O + best)) best = j;
            }
            r.cc_act[t * cfg.G_O + i] = best;
            const std::size_t g = i * cfg.R_O + best;
            for (std::size_t l = 0; l < d.group_size; ++l) r.cc_mask[t * d.N + g * d.group_size + l] = 1;
        }
        std::vector<std::size_t> survivors;
        for (std::size_t k = 0; k < d.N; ++k) {
            const bool both = r.sum_mask[t * d.N + k] && r.cc_mask[t * d.N + k];
            r.final_mask[t * d.N + k] = both ? 1 : 0;
            if (both) survivors.push_back(k);
        }
        if (survivors.size() != d.n_active) {
            throw Error(ErrorCode::invalid_argument, "route_reference: " + std::to_string(survivors.size()) +
                                                         " survivors, expected " + std::to_string(d.n_active));
        }
        for (std::size_t s = 0; s < survivors.size(); ++s) {
            r.indices.push_back(survivors[s]);
            r.probs(t, s) = score(t, survivors[s]);
        }
    }
    return r;
}

}  // namespace finermoe::oracle
