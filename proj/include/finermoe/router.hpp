// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-router bi-level routing. One score vector per token drives both
// sparsity levels:
//
//   1. sum level: inside each of the G_O R_O groups, keep the top-T_I experts;
//   2. concatenation level: per output component, pick the candidate group whose
//      summed score is largest;
//   3. activate the intersection, which always has exactly G_O T_I experts.
//
// Ties are broken toward the lowest index at every stage.

#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/routing.hpp"

namespace finermoe {

template <class T>
struct RouterState {
    Matrix<T> w;  ///< h x (number of logits)

    template <class U>
    RouterState<U> cast() const {
        return {w.template cast<U>()};
    }
    bool operator==(const RouterState&) const = default;
};

/// Raw router logits x Wr.
template <class T>
Matrix<T> router_logits(const Matrix<T>& x, const RouterState<T>& r) {
    if (x.cols() != r.w.rows()) {
        throw Error(ErrorCode::shape_mismatch,
                    "router input " + x.shape_string() + " does not match router weight " + r.w.shape_string());
    }
    return matmul(x, r.w);
}

/// Router scores: per-token softmax over the logits.
template <class T>
Matrix<T> score(const Matrix<T>& x, const RouterState<T>& r) {
    return softmax_rows(router_logits(x, r));
}

namespace detail {

/// Positions of the k largest entries of v; ties go to the lower position.
/// Returned in selection order (largest first).
template <class T>
std::vector<std::size_t> top_k_positions(std::span<const T> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
    idx.resize(k);
    return idx;
}

template <class T>
RoutingDecision<T> route_with_cc(const Matrix<T>& score, Matrix<T> cc_score, const FineRConfig& cfg) {
    validate(cfg);
    const DerivedDims d = derive(cfg);
    if (score.cols() != d.N) {
        throw Error(ErrorCode::shape_mismatch,
                    "score has " + std::to_string(score.cols()) + " columns, config has N=" + std::to_string(d.N));
    }
    if (cc_score.rows() != score.rows() || cc_score.cols() != d.n_groups) {
        throw Error(ErrorCode::shape_mismatch, "concatenation score " + cc_score.shape_string() + " expected " +
                                                   std::to_string(score.rows()) + "x" + std::to_string(d.n_groups));
    }
    const std::size_t L = score.rows();
    RoutingDecision<T> out;
    out.tokens = L;
    out.cfg = cfg;
    out.dims = d;
    out.score = score;
    out.sum_mask.assign(L * d.N, 0);
    out.cc_score = std::move(cc_score);
    out.cc_act.assign(L * cfg.G_O, 0);
    out.cc_mask.assign(L * d.N, 0);
    out.final_mask.assign(L * d.N, 0);
    out.indices.assign(L * d.n_active, 0);
    out.probs = Matrix<T>(L, d.n_active);

    parallel_for(L, [&](std::size_t t) {
        const auto row = score.row(t);
        // Sum level: top-T_I inside each group.
        for (std::size_t g = 0; g < d.n_groups; ++g) {
            const auto group = row.subspan(g * d.group_size, d.group_size);
            for (std::size_t l : top_k_positions(std::span<const T>(group.data(), group.size()), cfg.T_I)) out.sum_mask[t * d.N + g * d.group_size + l] = 1;
        }
        // Concatenation level: argmax over the R_O candidates of each component.
        const auto cc = out.cc_score.row(t);
        for (std::size_t i = 0; i < cfg.G_O; ++i) {
            const auto cand = cc.subspan(i * cfg.R_O, cfg.R_O);
            out.cc_act[t * cfg.G_O + i] = top_k_positions(std::span<const T>(cand.data(), cand.size()), std::size_t{1}).front();
        }
        for (std::size_t g = 0; g < d.n_groups; ++g) {
            if (g % cfg.R_O != out.cc_act[t * cfg.G_O + g / cfg.R_O]) continue;
            std::fill_n(out.cc_mask.begin() + static_cast<std::ptrdiff_t>(t * d.N + g * d.group_size), d.group_size, 1);
        }
        // Intersect, mask the rest to -inf and take the top G_O T_I.
        std::vector<T> final_score(d.N, -std::numeric_limits<T>::infinity());
        for (std::size_t k = 0; k < d.N; ++k) {
            const std::size_t at = t * d.N + k;
            out.final_mask[at] = out.sum_mask[at] & out.cc_mask[at];
            if (out.final_mask[at]) final_score[k] = row[k];
        }
        auto picked = top_k_positions(std::span<const T>(final_score), d.n_active);
        std::sort(picked.begin(), picked.end());
        for (std::size_t s = 0; s < d.n_active; ++s) {
            out.indices[t * d.n_active + s] = picked[s];
            out.probs(t, s) = row[picked[s]];
        }
    });
    return out;
}

}  // namespace detail

/// Per-token sum of each group's scores, accumulated in ascending expert order.
template <class T>
Matrix<T> group_score_sums(const Matrix<T>& score, const FineRConfig& cfg) {
    const DerivedDims d = derive(cfg);
    if (score.cols() != d.N) {
        throw Error(ErrorCode::shape_mismatch,
                    "score has " + std::to_string(score.cols()) + " columns, config has N=" + std::to_string(d.N));
    }
    Matrix<T> sums(score.rows(), d.n_groups);
    for (std::size_t t = 0; t < score.rows(); ++t) {
        for (std::size_t g = 0; g < d.n_groups; ++g) {
            T acc{0};
            for (std::size_t l = 0; l < d.group_size; ++l) acc += score(t, g * d.group_size + l);
            sums(t, g) = acc;
        }
    }
    return sums;
}

/// Single-router routing: the concatenation-level score of a candidate is the
/// sum of its group's scores.
template <class T>
RoutingDecision<T> route(const Matrix<T>& score, const FineRConfig& cfg) {
    return detail::route_with_cc(score, group_score_sums(score, cfg), cfg);
}

/// Two-router variant: the concatenation level is driven by an independent
/// score over the n_groups candidates; the activated weights still come from
/// score_sum.
template <class T>
RoutingDecision<T> route_separate(const Matrix<T>& score_sum, const Matrix<T>& score_cc, const FineRConfig& cfg) {
    return detail::route_with_cc(score_sum, score_cc, cfg);
}

}  // namespace finermoe
