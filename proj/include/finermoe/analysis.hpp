// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Read-only diagnostics over configs and models. Parameter / FLOP accounting
// lives here too, next to a small wall-clock benchmark of the sparse path.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/routing.hpp"
#include "finermoe/upcycle.hpp"

namespace finermoe {

// ---------------------------------------------------------------------------
// Similarity

struct SimilarityReport {
    double mean = 0.0;
    std::size_t pair_count = 0;
    std::vector<double> pairs;  ///< (0,1), (0,2), ..., (N-2,N-1)
};

/// Cosine of two equal-length vectors, accumulated in double and clamped to
/// [-1, 1]. cosine(v, v) == 1 and cosine(v, -v) == -1 exactly.
template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::shape_mismatch, "cosine of vectors with different lengths");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

/// Expert k flattened as w1 ‖ wg ‖ w2.
template <class T>
std::vector<T> flatten_expert(const ExpertWeights<T>& e) {
    std::vector<T> v;
    v.reserve(e.param_count());
    v.insert(v.end(), e.w1.values().begin(), e.w1.values().end());
    v.insert(v.end(), e.wg.values().begin(), e.wg.values().end());
    v.insert(v.end(), e.w2.values().begin(), e.w2.values().end());
    return v;
}

template <class T>
SimilarityReport expert_similarity(const MoEModel<T>& model, bool keep_pairs = false) {
    const std::size_t N = model.experts.size();
    if (N < 2) throw Error(ErrorCode::invalid_argument, "expert similarity needs at least two experts");
    std::vector<std::vector<T>> flat(N);
    parallel_for(N, [&](std::size_t k) { flat[k] = flatten_expert(model.experts[k]); });
    SimilarityReport r;
    r.pair_count = N * (N - 1) / 2;
    std::vector<double> pairs(r.pair_count);
    // Row offsets into the upper-triangular pair list so rows can run in parallel.
    std::vector<std::size_t> start(N, 0);
    for (std::size_t a = 1; a < N; ++a) start[a] = start[a - 1] + (N - a);
    parallel_for(N - 1, [&](std::size_t a) {
        for (std::size_t b = a + 1; b < N; ++b) {
            pairs[start[a] + (b - a - 1)] = cosine(std::span<const T>(flat[a]), std::span<const T>(flat[b]));
        }
    });
    double sum = 0.0;
    for (double p : pairs) sum += p;
    r.mean = sum / static_cast<double>(r.pair_count);
    if (keep_pairs) r.pairs = std::move(pairs);
    return r;
}

// ---------------------------------------------------------------------------
// Routing load

struct LoadReport {
    std::vector<std::size_t> counts;  ///< activations per expert
    std::vector<double> f;            ///< N / (A L) * counts
    std::size_t tokens = 0;
    double imbalance = 0.0;           ///< max f (mean f is 1)
};

template <class T>
LoadReport route_stats(std::span<const RoutingDecision<T>> decisions) {
    if (decisions.empty()) throw Error(ErrorCode::empty_input, "route_stats needs at least one decision");
    const DerivedDims d = decisions.front().dims;
    LoadReport r;
    r.counts.assign(d.N, 0);
    for (const auto& dec : decisions) {
        if (dec.dims.N != d.N || dec.dims.n_active != d.n_active) {
            throw Error(ErrorCode::shape_mismatch, "route_stats: decisions come from different configs");
        }
        for (std::size_t k : dec.indices) ++r.counts[k];
        r.tokens += dec.tokens;
    }
    if (r.tokens == 0) throw Error(ErrorCode::empty_input, "route_stats needs at least one token");
    const double scale = static_cast<double>(d.N) / (static_cast<double>(d.n_active) * static_cast<double>(r.tokens));
    r.f.resize(d.N);
    for (std::size_t k = 0; k < d.N; ++k) r.f[k] = scale * static_cast<double>(r.counts[k]);
    r.imbalance = *std::max_element(r.f.begin(), r.f.end());
    return r;
}

template <class T>
LoadReport route_stats(const RoutingDecision<T>& decision) {
    return route_stats(std::span<const RoutingDecision<T>>(&decision, 1));
}

// ---------------------------------------------------------------------------
// Parameter / FLOP accounting

/// Whole-model scaling used to compare one layer's arithmetic with a full
/// transformer: `layers` copies of the layer plus everything that is not FFN.
struct ReferenceScale {
    std::size_t layers = 1;
    std::uint64_t non_ffn_params = 0;
};

/// Non-FFN parameters of the 1.5B dense reference model (vocab 151936, h 1536,
/// 28 layers, 12 query / 2 key-value heads of width 128, biased QKV, RMSNorm).
namespace reference_1p5b {
inline constexpr std::uint64_t kVocab = 151936;
inline constexpr std::uint64_t kHidden = 1536;
inline constexpr std::uint64_t kLayers = 28;
inline constexpr std::uint64_t kKvWidth = 2 * 128;
inline constexpr std::uint64_t kEmbedding = kVocab * kHidden;
inline constexpr std::uint64_t kAttentionPerLayer = (kHidden * kHidden + kHidden)     // q
                                                    + 2 * (kHidden * kKvWidth + kKvWidth)  // k, v
                                                    + kHidden * kHidden;               // o
inline constexpr std::uint64_t kNormsPerLayer = 2 * kHidden;
/// Dense model, input and output embeddings tied.
inline constexpr std::uint64_t kNonFfnTied = kEmbedding + kLayers * (kAttentionPerLayer + kNormsPerLayer) + kHidden;
/// The converted MoE models carry a separate output head.
inline constexpr std::uint64_t kNonFfnUntied = kNonFfnTied + kEmbedding;
}  // namespace reference_1p5b

inline ReferenceScale reference_1p5b_scale() { return {reference_1p5b::kLayers, reference_1p5b::kNonFfnUntied}; }

struct CostReport {
    std::uint64_t total_params = 0;          ///< one layer
    std::uint64_t activated_params = 0;      ///< one layer, per token
    std::uint64_t expert_params = 0;         ///< one sparse expert
    std::uint64_t sparse_flops = 0;          ///< per token, activated experts
    std::uint64_t shared_flops = 0;          ///< per token
    std::uint64_t router_flops = 0;          ///< per token, router matmul(s) + projection
    std::uint64_t model_total_params = 0;    ///< with ReferenceScale applied
    std::uint64_t model_activated_params = 0;
    std::optional<double> wall_ns_per_token;

    std::uint64_t flops_per_token() const noexcept { return sparse_flops + shared_flops + router_flops; }
};

/// Sparse path timing: mean wall-clock nanoseconds per token of
/// sparse_experts_forward over `repeats` runs (best of the runs).
template <class T>
double time_sparse_path(const MoEModel<T>& model, std::size_t tokens, std::size_t repeats, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix<T> x = random_normal<T>(tokens, model.cfg.h, rng);
    const RoutingDecision<T> decision = route_tokens(x, model);
    double best = 0.0;
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = sparse_experts_forward(x, model, decision);
        const auto t1 = std::chrono::steady_clock::now();
        const double ns = std::chrono::duration<double, std::nano>(t1 - t0).count() / static_cast<double>(tokens);
        if (r == 0 || ns < best) best = ns;
        if (out.y.rows() != tokens) throw Error(ErrorCode::shape_mismatch, "unexpected sparse output");
    }
    return best;
}

/// Random MoE model for timing runs (dense weights drawn from N(0, 0.02^2)).
inline MoEModel<float> random_moe_model(const FineRConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const auto dense = random_ffn<float, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.02);
    return upcycle(dense, cfg, seed + 1);
}

inline CostReport cost_report(const FineRConfig& cfg, std::size_t tokens = 1, bool timed = false,
                              std::optional<ReferenceScale> scale = std::nullopt, std::uint64_t seed = 0) {
    validate(cfg);
    const DerivedDims d = derive(cfg);
    const std::uint64_t h = cfg.h, H = cfg.H;
    const std::uint64_t shared = cfg.share_expert ? 3 * h * H : 0;
    const std::uint64_t expert = 2 * h * d.H_e + d.H_e * d.h_e;
    std::uint64_t routing = h * d.N;
    if (cfg.router_mode == RouterMode::separate) routing += h * d.n_groups;
    const std::uint64_t proj = cfg.concat_proj ? h * h : 0;

    CostReport r;
    r.expert_params = expert;
    r.total_params = shared + d.N * expert + routing + proj;
    r.activated_params = shared + d.n_active * expert + routing + proj;
    // One multiply-add (2 FLOPs) per weight touched by a matmul.
    r.sparse_flops = 2 * d.n_active * expert;
    r.shared_flops = 2 * shared;
    r.router_flops = 2 * (routing + proj);
    if (scale) {
        r.model_total_params = scale->layers * r.total_params + scale->non_ffn_params;
        r.model_activated_params = scale->layers * r.activated_params + scale->non_ffn_params;
    }
    if (timed) r.wall_ns_per_token = time_sparse_path(random_moe_model(cfg, seed), std::max<std::size_t>(tokens, 1), 3, seed);
    return r;
}

}  // namespace finermoe
