// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// SwiGLU feed-forward blocks: the pretrained dense FFN, the full-size shared
// expert and the finer-grained sparse experts all compute
//
//     y = ((x W1) ⊙ SiLU(x Wg)) W2
//
// with no bias terms. They differ only in shape, so they share one template
// and are kept apart by a tag.

#pragma once

#include <cstddef>
#include <string>

#include "finermoe/numerics.hpp"

namespace finermoe {

struct DenseTag {};
struct SharedTag {};
struct ExpertTag {};

template <class T, class Tag>
struct GatedFfn {
    Matrix<T> w1;  ///< up projection, in x inter
    Matrix<T> wg;  ///< gate, in x inter
    Matrix<T> w2;  ///< down projection, inter x out

    std::size_t in_dim() const noexcept { return w1.rows(); }
    std::size_t inter_dim() const noexcept { return w1.cols(); }
    std::size_t out_dim() const noexcept { return w2.cols(); }
    std::size_t param_count() const noexcept { return w1.size() + wg.size() + w2.size(); }

    void check_shapes() const {
        if (wg.rows() != w1.rows() || wg.cols() != w1.cols() || w2.rows() != w1.cols()) {
            throw Error(ErrorCode::shape_mismatch, "inconsistent SwiGLU weights: w1 " + w1.shape_string() + ", wg " +
                                                       wg.shape_string() + ", w2 " + w2.shape_string());
        }
    }

    /// Same numbers under a different role (e.g. the shared expert copied from
    /// the dense FFN).
    template <class OtherTag>
    GatedFfn<T, OtherTag> as() const {
        return {w1, wg, w2};
    }

    template <class U>
    GatedFfn<U, Tag> cast() const {
        return {w1.template cast<U>(), wg.template cast<U>(), w2.template cast<U>()};
    }

    bool operator==(const GatedFfn&) const = default;
};

template <class T>
using DenseFfnWeights = GatedFfn<T, DenseTag>;
template <class T>
using SharedExpertWeights = GatedFfn<T, SharedTag>;
template <class T>
using ExpertWeights = GatedFfn<T, ExpertTag>;

template <class T, class Tag>
GatedFfn<T, Tag> zero_ffn(std::size_t in, std::size_t inter, std::size_t out) {
    return {Matrix<T>(in, inter), Matrix<T>(in, inter), Matrix<T>(inter, out)};
}

template <class T, class Tag>
GatedFfn<T, Tag> random_ffn(std::size_t in, std::size_t inter, std::size_t out, Rng& rng, double stddev = 0.1) {
    return {random_normal<T>(in, inter, rng, stddev), random_normal<T>(in, inter, rng, stddev),
            random_normal<T>(inter, out, rng, stddev)};
}

/// Intermediate activations kept for the backward pass.
template <class T>
struct SwigluTrace {
    Matrix<T> up;      ///< x W1
    Matrix<T> gate;    ///< x Wg (pre-activation)
    Matrix<T> hidden;  ///< up ⊙ SiLU(gate)
};

template <class T, class Tag>
Matrix<T> swiglu_forward(const Matrix<T>& x, const GatedFfn<T, Tag>& w, SwigluTrace<T>* trace = nullptr) {
    w.check_shapes();
    if (x.cols() != w.in_dim()) {
        throw Error(ErrorCode::shape_mismatch,
                    "expert input " + x.shape_string() + " does not match w1 " + w.w1.shape_string());
    }
    Matrix<T> up = matmul(x, w.w1);
    Matrix<T> gate = matmul(x, w.wg);
    Matrix<T> hidden(up.rows(), up.cols());
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        hidden.values()[i] = up.values()[i] * silu(gate.values()[i]);
    }
    Matrix<T> y = matmul(hidden, w.w2);
    if (trace) *trace = {std::move(up), std::move(gate), std::move(hidden)};
    return y;
}

/// One finer-grained expert: L x h in, L x h_e out.
template <class T>
Matrix<T> expert_forward(const Matrix<T>& x, const ExpertWeights<T>& w) {
    return swiglu_forward(x, w);
}

/// The full-size shared expert: L x h in, L x h out.
template <class T>
Matrix<T> shared_forward(const Matrix<T>& x, const SharedExpertWeights<T>& w) {
    return swiglu_forward(x, w);
}

/// Gradients of one SwiGLU block given dL/dy; accumulates into the outputs.
template <class T, class Tag>
void swiglu_backward(const Matrix<T>& x, const GatedFfn<T, Tag>& w, const SwigluTrace<T>& trace,
                     const Matrix<T>& dy, GatedFfn<T, Tag>& dw, Matrix<T>& dx) {
    dw.w2 += matmul(trace.hidden.transposed(), dy);
    const Matrix<T> dhidden = matmul(dy, w.w2.transposed());
    Matrix<T> dup(dhidden.rows(), dhidden.cols());
    Matrix<T> dgate(dhidden.rows(), dhidden.cols());
    for (std::size_t i = 0; i < dhidden.size(); ++i) {
        const T g = trace.gate.values()[i];
        dup.values()[i] = dhidden.values()[i] * silu(g);
        dgate.values()[i] = dhidden.values()[i] * trace.up.values()[i] * silu_grad(g);
    }
    const Matrix<T> xt = x.transposed();
    dw.w1 += matmul(xt, dup);
    dw.wg += matmul(xt, dgate);
    dx += matmul(dup, w.w1.transposed());
    dx += matmul(dgate, w.wg.transposed());
}

}  // namespace finermoe
