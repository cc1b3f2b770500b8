// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/numerics.hpp"

namespace finermoe {

/// Everything the bi-level router decides for a batch of L tokens.
///
/// Expert-indexed arrays are L x N row-major. Because groups are contiguous
/// runs of `group_size` experts, the same storage doubles as the
/// L x n_groups x group_size "group" view.
template <class T>
struct RoutingDecision {
    std::size_t tokens = 0;
    FineRConfig cfg;
    DerivedDims dims;

    Matrix<T> score;                   ///< L x N router scores
    std::vector<std::uint8_t> sum_mask;  ///< L x N, T_I set per group
    Matrix<T> cc_score;                ///< L x (G_O R_O), component-major
    std::vector<std::size_t> cc_act;   ///< L x G_O, chosen candidate per component
    std::vector<std::uint8_t> cc_mask;   ///< L x N, cc choice broadcast over group members
    std::vector<std::uint8_t> final_mask;  ///< L x N, sum_mask AND cc_mask
    std::vector<std::size_t> indices;  ///< L x n_active, ascending per token
    Matrix<T> probs;                   ///< L x n_active, score at `indices`

    T group_score(std::size_t t, std::size_t g, std::size_t l) const noexcept {
        return score(t, g * dims.group_size + l);
    }
    bool sum_masked(std::size_t t, std::size_t g, std::size_t l) const noexcept {
        return sum_mask[t * dims.N + g * dims.group_size + l] != 0;
    }
    T cc(std::size_t t, std::size_t component, std::size_t candidate) const noexcept {
        return cc_score(t, component * cfg.R_O + candidate);
    }
    std::size_t chosen_candidate(std::size_t t, std::size_t component) const noexcept {
        return cc_act[t * cfg.G_O + component];
    }
    bool active(std::size_t t, std::size_t k) const noexcept { return final_mask[t * dims.N + k] != 0; }
    std::size_t index(std::size_t t, std::size_t slot) const noexcept { return indices[t * dims.n_active + slot]; }
    T prob(std::size_t t, std::size_t slot) const noexcept { return probs(t, slot); }

    bool operator==(const RoutingDecision&) const = default;
};

}  // namespace finermoe
