// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// The assembled layer. Per token:
//
//   route -> permute/dispatch to experts -> expert forward -> unpermute
//   -> weighted sum inside the selected group of each output component
//   -> concatenate the G_O components (width h_e each, h in total)
//   -> optional h x h projection -> add the shared expert.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/router.hpp"
#include "finermoe/routing.hpp"

namespace finermoe {

template <class T>
struct MoEModel {
    FineRConfig cfg;
    std::optional<SharedExpertWeights<T>> shared;  ///< present iff cfg.share_expert
    std::vector<ExpertWeights<T>> experts;         ///< N experts, component-major
    RouterState<T> router;                         ///< h x N
    std::optional<RouterState<T>> cc_router;       ///< h x n_groups, separate-router mode only
    std::optional<Matrix<T>> concat_proj;          ///< h x h, concat_proj variant only

    DerivedDims dims() const { return derive(cfg); }

    /// Checks every structural invariant against cfg; throws on the first violation.
    void check() const {
        validate(cfg);
        const DerivedDims d = derive(cfg);
        auto fail = [](const std::string& m) { throw Error(ErrorCode::shape_mismatch, m); };
        if (experts.size() != d.N) {
            fail("model has " + std::to_string(experts.size()) + " experts, config needs " + std::to_string(d.N));
        }
        for (std::size_t k = 0; k < experts.size(); ++k) {
            const auto& e = experts[k];
            e.check_shapes();
            if (e.in_dim() != cfg.h || e.inter_dim() != d.H_e || e.out_dim() != d.h_e) {
                fail("expert " + std::to_string(k) + " has w1 " + e.w1.shape_string() + ", w2 " + e.w2.shape_string() +
                     "; expected h=" + std::to_string(cfg.h) + ", H_e=" + std::to_string(d.H_e) +
                     ", h_e=" + std::to_string(d.h_e));
            }
        }
        if (cfg.share_expert != shared.has_value()) fail("shared expert presence does not match share_expert");
        if (shared) {
            shared->check_shapes();
            if (shared->in_dim() != cfg.h || shared->inter_dim() != cfg.H || shared->out_dim() != cfg.h) {
                fail("shared expert shape does not match (h, H)");
            }
        }
        if (router.w.rows() != cfg.h || router.w.cols() != d.N) {
            fail("router weight " + router.w.shape_string() + " expected " + std::to_string(cfg.h) + "x" + std::to_string(d.N));
        }
        if ((cfg.router_mode == RouterMode::separate) != cc_router.has_value()) {
            fail("concatenation router presence does not match router_mode");
        }
        if (cc_router && (cc_router->w.rows() != cfg.h || cc_router->w.cols() != d.n_groups)) {
            fail("concatenation router weight " + cc_router->w.shape_string() + " expected " + std::to_string(cfg.h) +
                 "x" + std::to_string(d.n_groups));
        }
        if (cfg.concat_proj != concat_proj.has_value()) fail("concat_proj presence does not match config");
        if (concat_proj && (concat_proj->rows() != cfg.h || concat_proj->cols() != cfg.h)) {
            fail("concat_proj must be h x h, got " + concat_proj->shape_string());
        }
    }

    template <class U>
    MoEModel<U> cast() const {
        MoEModel<U> m;
        m.cfg = cfg;
        if (shared) m.shared = shared->template cast<U>();
        m.experts.reserve(experts.size());
        for (const auto& e : experts) m.experts.push_back(e.template cast<U>());
        m.router = router.template cast<U>();
        if (cc_router) m.cc_router = cc_router->template cast<U>();
        if (concat_proj) m.concat_proj = concat_proj->template cast<U>();
        return m;
    }

    bool operator==(const MoEModel&) const = default;
};

/// Routes x with the model's router(s).
template <class T>
RoutingDecision<T> route_tokens(const Matrix<T>& x, const MoEModel<T>& model) {
    const Matrix<T> s = score(x, model.router);
    if (model.cfg.router_mode == RouterMode::separate) {
        return route_separate(s, score(x, *model.cc_router), model.cfg);
    }
    return route(s, model.cfg);
}

// ---------------------------------------------------------------------------
// Dispatch

/// Maps each routed (token, slot) pair to a position in an expert-major
/// buffer and back. Pair ids are token * n_active + slot.
struct DispatchPlan {
    std::size_t tokens = 0;
    std::size_t n_active = 0;
    std::size_t n_experts = 0;
    std::vector<std::size_t> offsets;   ///< N + 1 entries; expert k owns [offsets[k], offsets[k+1])
    std::vector<std::size_t> order;     ///< permuted position -> pair id
    std::vector<std::size_t> position;  ///< pair id -> permuted position

    std::size_t pair_count() const noexcept { return order.size(); }
    std::size_t batch_size(std::size_t k) const noexcept { return offsets[k + 1] - offsets[k]; }
    static std::size_t token_of(std::size_t pair, std::size_t n_active) noexcept { return pair / n_active; }

    /// Token ids routed to expert k, ascending.
    std::vector<std::size_t> tokens_of(std::size_t k) const {
        std::vector<std::size_t> out;
        out.reserve(batch_size(k));
        for (std::size_t p = offsets[k]; p < offsets[k + 1]; ++p) out.push_back(order[p] / n_active);
        return out;
    }
};

template <class T>
DispatchPlan build_dispatch_plan(const RoutingDecision<T>& decision) {
    const std::size_t N = decision.dims.N;
    const std::size_t A = decision.dims.n_active;
    DispatchPlan plan;
    plan.tokens = decision.tokens;
    plan.n_active = A;
    plan.n_experts = N;
    plan.offsets.assign(N + 1, 0);
    for (std::size_t k : decision.indices) ++plan.offsets[k + 1];
    for (std::size_t k = 0; k < N; ++k) plan.offsets[k + 1] += plan.offsets[k];
    // Counting sort by expert; scanning pairs in id order keeps tokens ascending.
    std::vector<std::size_t> cursor(plan.offsets.begin(), plan.offsets.end() - 1);
    plan.order.resize(decision.indices.size());
    plan.position.resize(decision.indices.size());
    for (std::size_t pair = 0; pair < decision.indices.size(); ++pair) {
        const std::size_t p = cursor[decision.indices[pair]]++;
        plan.order[p] = pair;
        plan.position[pair] = p;
    }
    return plan;
}

/// Row r of the result is row `token_of(order[r])` of x.
template <class T>
Matrix<T> permute(const Matrix<T>& x, const DispatchPlan& plan) {
    Matrix<T> out(plan.pair_count(), x.cols());
    for (std::size_t p = 0; p < plan.pair_count(); ++p) {
        const auto src = x.row(plan.order[p] / plan.n_active);
        std::copy(src.begin(), src.end(), out.row(p).begin());
    }
    return out;
}

/// Inverse of the permutation: expert-major rows back to pair-id order.
template <class T>
Matrix<T> unpermute(const Matrix<T>& permuted, const DispatchPlan& plan) {
    Matrix<T> out(plan.pair_count(), permuted.cols());
    for (std::size_t pair = 0; pair < plan.pair_count(); ++pair) {
        const auto src = permuted.row(plan.position[pair]);
        std::copy(src.begin(), src.end(), out.row(pair).begin());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward

/// Per-token candidate vectors O_i^j for every group, L x (n_groups * h_e).
/// Each is the weighted sum of its group's sum-level winners, whether or not the
/// concatenation level picked it.
template <class T>
Matrix<T> candidate_vectors(const Matrix<T>& x, const MoEModel<T>& model, const RoutingDecision<T>& decision) {
    const DerivedDims d = model.dims();
    Matrix<T> out(x.rows(), d.n_groups * d.h_e);
    parallel_for(x.rows(), [&](std::size_t t) {
        const Matrix<T> xt = x.block(t, t + 1, 0, x.cols());
        for (std::size_t g = 0; g < d.n_groups; ++g) {
            for (std::size_t l = 0; l < d.group_size; ++l) {
                if (!decision.sum_masked(t, g, l)) continue;
                const std::size_t k = g * d.group_size + l;
                const Matrix<T> e = expert_forward(xt, model.experts[k]);
                const T w = decision.group_score(t, g, l);
                for (std::size_t j = 0; j < d.h_e; ++j) out(t, g * d.h_e + j) += w * e(0, j);
            }
        }
    });
    return out;
}

template <class T>
struct SparseOutput {
    Matrix<T> y;                          ///< L x h concatenated output O
    std::optional<Matrix<T>> candidates;  ///< L x (n_groups * h_e), when requested
};

/// Sparse-expert path: dispatch, expert forward, weighted sum inside each
/// selected group (ascending expert index), concatenation in component order.
template <class T>
SparseOutput<T> sparse_experts_forward(const Matrix<T>& x, const MoEModel<T>& model,
                                       const RoutingDecision<T>& decision, bool keep_candidates = false) {
    const DerivedDims d = model.dims();
    if (x.cols() != model.cfg.h) {
        throw Error(ErrorCode::shape_mismatch, "input " + x.shape_string() + " does not match h=" + std::to_string(model.cfg.h));
    }
    if (decision.tokens != x.rows() || decision.dims.N != d.N || decision.dims.n_active != d.n_active) {
        throw Error(ErrorCode::shape_mismatch, "routing decision does not match the input or model");
    }
    const DispatchPlan plan = build_dispatch_plan(decision);
    const Matrix<T> dispatched = permute(x, plan);

    // Expert-major results; expert k writes only its own rows.
    Matrix<T> expert_out(plan.pair_count(), d.h_e);
    parallel_for(d.N, [&](std::size_t k) {
        if (plan.batch_size(k) == 0) return;
        const Matrix<T> batch = dispatched.block(plan.offsets[k], plan.offsets[k + 1], 0, x.cols());
        expert_out.set_block(plan.offsets[k], 0, expert_forward(batch, model.experts[k]));
    });
    const Matrix<T> pair_out = unpermute(expert_out, plan);

    SparseOutput<T> out{Matrix<T>(x.rows(), model.cfg.h), std::nullopt};
    parallel_for(x.rows(), [&](std::size_t t) {
        auto row = out.y.row(t);
        for (std::size_t s = 0; s < d.n_active; ++s) {
            const std::size_t pair = t * d.n_active + s;
            const std::size_t k = decision.index(t, s);
            const std::size_t c = component_of(k, model.cfg);
            const T w = decision.prob(t, s);
            const auto e = pair_out.row(pair);
            for (std::size_t j = 0; j < d.h_e; ++j) row[c * d.h_e + j] += w * e[j];
        }
    });
    if (keep_candidates) out.candidates = candidate_vectors(x, model, decision);
    return out;
}

template <class T>
struct LayerOutput {
    Matrix<T> y;
    RoutingDecision<T> decision;
    std::optional<Matrix<T>> candidate_vectors;
};

/// Combines the sparse path with the projection and shared expert.
template <class T>
Matrix<T> finish_layer(const Matrix<T>& x, const MoEModel<T>& model, Matrix<T> sparse) {
    if (model.concat_proj) sparse = matmul(sparse, *model.concat_proj);
    if (model.shared) return shared_forward(x, *model.shared) + sparse;
    return sparse;
}

template <class T>
LayerOutput<T> forward(const Matrix<T>& x, const MoEModel<T>& model, bool keep_candidates = false) {
    if (x.cols() != model.cfg.h) {
        throw Error(ErrorCode::shape_mismatch, "input " + x.shape_string() + " does not match h=" + std::to_string(model.cfg.h));
    }
    RoutingDecision<T> decision = route_tokens(x, model);
    SparseOutput<T> sparse = sparse_experts_forward(x, model, decision, keep_candidates);
    Matrix<T> y = finish_layer(x, model, std::move(sparse.y));
    return {std::move(y), std::move(decision), std::move(sparse.candidates)};
}

/// Sparse path with the router bypassed: every expert of candidate 0 in every
/// component is activated at weight 1. On an upcycled model with R_I = 1 this
/// reassembles the dense FFN exactly (up to rounding).
template <class T>
Matrix<T> forced_sparse_forward(const Matrix<T>& x, const MoEModel<T>& model) {
    const DerivedDims d = model.dims();
    if (x.cols() != model.cfg.h) {
        throw Error(ErrorCode::shape_mismatch, "input " + x.shape_string() + " does not match h=" + std::to_string(model.cfg.h));
    }
    Matrix<T> y(x.rows(), model.cfg.h);
    for (std::size_t c = 0; c < model.cfg.G_O; ++c) {
        const std::size_t g = group_index(c, 0, model.cfg);
        for (std::size_t l = 0; l < d.group_size; ++l) {
            const Matrix<T> e = expert_forward(x, model.experts[g * d.group_size + l]);
            for (std::size_t t = 0; t < x.rows(); ++t)
                for (std::size_t j = 0; j < d.h_e; ++j) y(t, c * d.h_e + j) += e(t, j);
        }
    }
    return y;
}

/// forced_sparse_forward followed by the projection and shared expert.
template <class T>
Matrix<T> forward_forced(const Matrix<T>& x, const MoEModel<T>& model) {
    return finish_layer(x, model, forced_sparse_forward(x, model));
}

}  // namespace finermoe
