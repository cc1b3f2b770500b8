// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense-to-MoE conversion. The shared expert is a copy of the pretrained FFN;
// sparse expert k takes intermediate slice i and output slice j of it, with
//
//     i = (k mod (G_I R_I)) mod G_I        j = floor(k / (R_O G_I R_I))
//
// Replication (G_I = G_O = R_O = 1) and intermediate-only partitioning
// (G_O = R_O = R_I = 1) both fall out as special cases.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"

namespace finermoe {

inline constexpr double kRouterInitStd = 0.02;

struct SliceAssignment {
    std::size_t k = 0;
    std::size_t i_slice = 0;  ///< intermediate slice in [0, G_I)
    std::size_t j_slice = 0;  ///< output slice in [0, G_O)

    bool operator==(const SliceAssignment&) const = default;
};

inline SliceAssignment expert_slice_indices(std::size_t k, const FineRConfig& cfg) {
    const DerivedDims d = derive(cfg);
    if (k >= d.N) {
        throw Error(ErrorCode::out_of_range, "expert index " + std::to_string(k) + " out of range [0, " + std::to_string(d.N) + ")");
    }
    return {k, (k % (cfg.G_I * cfg.R_I)) % cfg.G_I, k / (cfg.R_O * cfg.G_I * cfg.R_I)};
}

template <class T>
ExpertWeights<T> slice_expert(const DenseFfnWeights<T>& dense, const FineRConfig& cfg, std::size_t k) {
    const DerivedDims d = derive(cfg);
    const SliceAssignment s = expert_slice_indices(k, cfg);
    const std::size_t c0 = s.i_slice * d.H_e;
    const std::size_t c1 = c0 + d.H_e;
    const std::size_t o0 = s.j_slice * d.h_e;
    return {dense.w1.col_block(c0, c1), dense.wg.col_block(c0, c1), dense.w2.block(c0, c1, o0, o0 + d.h_e)};
}

namespace detail {

template <class T>
void check_dense_against(const DenseFfnWeights<T>& dense, const FineRConfig& cfg) {
    dense.check_shapes();
    if (dense.in_dim() != cfg.h || dense.inter_dim() != cfg.H || dense.out_dim() != cfg.h) {
        throw Error(ErrorCode::shape_mismatch, "dense FFN (w1 " + dense.w1.shape_string() + ", w2 " +
                                                   dense.w2.shape_string() + ") does not match config h=" +
                                                   std::to_string(cfg.h) + ", H=" + std::to_string(cfg.H));
    }
}

/// Router and variant parameters that are not copied from the dense model.
template <class T>
void init_routing_params(MoEModel<T>& m, std::uint64_t seed) {
    const DerivedDims d = m.dims();
    Rng rng(seed);
    m.router.w = random_normal<T>(m.cfg.h, d.N, rng, kRouterInitStd);
    if (m.cfg.router_mode == RouterMode::separate) {
        Rng cc_rng = rng.fork(1);
        m.cc_router = RouterState<T>{random_normal<T>(m.cfg.h, d.n_groups, cc_rng, kRouterInitStd)};
    }
    if (m.cfg.concat_proj) m.concat_proj = Matrix<T>::identity(m.cfg.h);
}

}  // namespace detail

template <class T>
MoEModel<T> upcycle(const DenseFfnWeights<T>& dense, const FineRConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    detail::check_dense_against(dense, cfg);
    const DerivedDims d = derive(cfg);
    MoEModel<T> m;
    m.cfg = cfg;
    if (cfg.share_expert) m.shared = dense.template as<SharedTag>();
    m.experts.resize(d.N);
    parallel_for(d.N, [&](std::size_t k) { m.experts[k] = slice_expert(dense, cfg, k); });
    detail::init_routing_params(m, seed);
    return m;
}

/// Replication baseline with partial re-initialization: n_experts copies of the
/// dense FFN; in every expert matrix each entry is independently re-drawn with
/// probability drop_ratio from N(0, sd^2), sd being the donor matrix's
/// empirical standard deviation. The shared expert stays an exact copy.
template <class T>
MoEModel<T> drop_upcycle(const DenseFfnWeights<T>& dense, std::size_t n_experts, double drop_ratio,
                         std::size_t n_active, std::uint64_t seed) {
    if (!(drop_ratio >= 0.0 && drop_ratio <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "drop_ratio must be in [0, 1], got " + std::to_string(drop_ratio));
    }
    FineRConfig cfg;
    cfg.h = dense.in_dim();
    cfg.H = dense.inter_dim();
    cfg.G_I = 1;
    cfg.R_I = n_experts;
    cfg.G_O = 1;
    cfg.R_O = 1;
    cfg.T_I = n_active;
    MoEModel<T> m = upcycle(dense, cfg, seed);

    auto stddev = [](const Matrix<T>& w) {
        double mean = 0.0;
        for (T v : w.values()) mean += v;
        mean /= static_cast<double>(w.size());
        double var = 0.0;
        for (T v : w.values()) var += (v - mean) * (v - mean);
        return std::sqrt(var / static_cast<double>(w.size()));
    };
    const double sd[3] = {stddev(dense.w1), stddev(dense.wg), stddev(dense.w2)};
    const Rng base(seed ^ 0xD0D0D0D0ULL);
    for (std::size_t k = 0; k < n_experts; ++k) {
        Rng rng = base.fork(k);
        Matrix<T>* mats[3] = {&m.experts[k].w1, &m.experts[k].wg, &m.experts[k].w2};
        for (int w = 0; w < 3; ++w) {
            for (auto& v : mats[w]->values()) {
                // Draw the coin unconditionally so the stream layout does not depend on the ratio.
                const bool drop = rng.uniform() < drop_ratio;
                const double fresh = rng.normal(0.0, sd[w]);
                if (drop) v = static_cast<T>(fresh);
            }
        }
    }
    return m;
}

}  // namespace finermoe
