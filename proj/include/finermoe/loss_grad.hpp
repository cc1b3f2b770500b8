// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Load-balancing loss and reverse-mode gradients of the full layer. A central
// finite-difference checker sits at the bottom.
//
// Balance loss over L tokens and N experts, with A = G_O T_I activations per token:
//
//     P_i = (1/L) sum_t s_{i,t}                  (full softmax score)
//     f_i = N / (A L) sum_t 1[token t activates i]
//     loss = alpha * sum_i f_i P_i
//
// f is piecewise constant in the parameters and is treated as a constant when
// differentiating. Top-k selection gets no gradient; the selected scores do.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"
#include "finermoe/router.hpp"
#include "finermoe/routing.hpp"

namespace finermoe {

inline constexpr double kBalanceAlpha = 0.001;

/// Scalar type for loss values: double, or T when T is wider.
template <class T>
using LossScalar = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

namespace detail {

/// alpha * sum_i f_i P_i accumulated in LossScalar<T>; balance_loss reports the
/// same quantity in double.
template <class T>
LossScalar<T> balance_loss_value(const RoutingDecision<T>& decision, double alpha) {
    using S = LossScalar<T>;
    const std::size_t L = decision.tokens;
    const std::size_t N = decision.dims.N;
    if (L == 0) throw Error(ErrorCode::empty_input, "balance_loss needs at least one token");
    std::vector<S> P(N, S{0});
    std::vector<std::size_t> counts(N, 0);
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t k = 0; k < N; ++k) {
            P[k] += static_cast<S>(decision.score(t, k));
            if (decision.active(t, k)) ++counts[k];
        }
    }
    const S scale = static_cast<S>(N) / (static_cast<S>(decision.dims.n_active) * static_cast<S>(L));
    S sum = 0;
    for (std::size_t k = 0; k < N; ++k) sum += scale * static_cast<S>(counts[k]) * (P[k] / static_cast<S>(L));
    return static_cast<S>(alpha) * sum;
}

}  // namespace detail

struct BalanceLossReport {
    std::vector<double> f;  ///< per-expert load factor
    std::vector<double> P;  ///< per-expert mean score
    double loss = 0.0;
    double alpha = kBalanceAlpha;
};

template <class T>
BalanceLossReport balance_loss(const RoutingDecision<T>& decision, double alpha = kBalanceAlpha) {
    const std::size_t L = decision.tokens;
    if (L == 0) throw Error(ErrorCode::empty_input, "balance_loss needs at least one token");
    const std::size_t N = decision.dims.N;
    BalanceLossReport r;
    r.alpha = alpha;
    r.f.assign(N, 0.0);
    r.P.assign(N, 0.0);
    std::vector<std::size_t> counts(N, 0);
    for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t k = 0; k < N; ++k) {
            r.P[k] += static_cast<double>(decision.score(t, k));
            if (decision.active(t, k)) ++counts[k];
        }
    }
    const double scale = static_cast<double>(N) / (static_cast<double>(decision.dims.n_active) * static_cast<double>(L));
    double sum = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
        r.P[k] /= static_cast<double>(L);
        r.f[k] = scale * static_cast<double>(counts[k]);
        sum += r.f[k] * r.P[k];
    }
    r.loss = alpha * sum;
    return r;
}

/// d loss / d s_{i,t} = alpha f_i / L, with f held constant.
template <class T>
Matrix<T> balance_loss_score_grad(const RoutingDecision<T>& decision, double alpha = kBalanceAlpha) {
    const BalanceLossReport r = balance_loss(decision, alpha);
    Matrix<T> g(decision.tokens, decision.dims.N);
    for (std::size_t t = 0; t < decision.tokens; ++t)
        for (std::size_t k = 0; k < decision.dims.N; ++k)
            g(t, k) = static_cast<T>(alpha * r.f[k] / static_cast<double>(decision.tokens));
    return g;
}

/// Backpropagates dL/dscore through the row softmax to dL/dlogits.
template <class T>
Matrix<T> softmax_backward(const Matrix<T>& score, const Matrix<T>& dscore) {
    Matrix<T> dlogits(score.rows(), score.cols());
    for (std::size_t t = 0; t < score.rows(); ++t) {
        T inner{0};
        for (std::size_t k = 0; k < score.cols(); ++k) inner += score(t, k) * dscore(t, k);
        for (std::size_t k = 0; k < score.cols(); ++k) dlogits(t, k) = score(t, k) * (dscore(t, k) - inner);
    }
    return dlogits;
}

// ---------------------------------------------------------------------------
// Layer gradients

/// Gradients for every parameter, stored in a model-shaped container, plus dL/dx.
template <class T>
struct LayerGradients {
    MoEModel<T> params;
    Matrix<T> dx;
};

template <class T>
LayerGradients<T> zero_gradients_like(const MoEModel<T>& model, std::size_t tokens) {
    const DerivedDims d = model.dims();
    LayerGradients<T> g;
    g.params.cfg = model.cfg;
    if (model.shared) g.params.shared = zero_ffn<T, SharedTag>(model.cfg.h, model.cfg.H, model.cfg.h);
    g.params.experts.assign(d.N, zero_ffn<T, ExpertTag>(model.cfg.h, d.H_e, d.h_e));
    g.params.router.w = Matrix<T>(model.router.w.rows(), model.router.w.cols());
    if (model.cc_router) g.params.cc_router = RouterState<T>{Matrix<T>(model.cc_router->w.rows(), model.cc_router->w.cols())};
    if (model.concat_proj) g.params.concat_proj = Matrix<T>(model.cfg.h, model.cfg.h);
    g.dx = Matrix<T>(tokens, model.cfg.h);
    return g;
}

/// Reverse-mode gradients of the layer given upstream = dL/dy. `score_grad`
/// (L x N), when given, is an extra dL/dscore term such as the balance loss.
template <class T>
LayerGradients<T> backward(const Matrix<T>& x, const MoEModel<T>& model, const Matrix<T>& upstream,
                           const RoutingDecision<T>& decision, const Matrix<T>* score_grad = nullptr) {
    const DerivedDims d = model.dims();
    if (upstream.rows() != x.rows() || upstream.cols() != model.cfg.h) {
        throw Error(ErrorCode::shape_mismatch, "upstream gradient " + upstream.shape_string() + " does not match output " +
                                                   std::to_string(x.rows()) + "x" + std::to_string(model.cfg.h));
    }
    if (decision.tokens != x.rows() || decision.dims.N != d.N) {
        throw Error(ErrorCode::shape_mismatch, "routing decision does not match the input or model");
    }
    if (score_grad && (score_grad->rows() != x.rows() || score_grad->cols() != d.N)) {
        throw Error(ErrorCode::shape_mismatch, "score gradient " + score_grad->shape_string() + " expected L x N");
    }
    LayerGradients<T> g = zero_gradients_like(model, x.rows());

    // Projection after concatenation.
    Matrix<T> dsparse = upstream;
    if (model.concat_proj) {
        const Matrix<T> sparse = sparse_experts_forward(x, model, decision).y;
        *g.params.concat_proj += matmul(sparse.transposed(), upstream);
        dsparse = matmul(upstream, model.concat_proj->transposed());
    }

    if (model.shared) {
        SwigluTrace<T> trace;
        swiglu_forward(x, *model.shared, &trace);
        swiglu_backward(x, *model.shared, trace, upstream, *g.params.shared, g.dx);
    }

    // Sparse experts, one batch per expert in ascending expert order.
    const DispatchPlan plan = build_dispatch_plan(decision);
    Matrix<T> dscore(x.rows(), d.N);
    for (std::size_t k = 0; k < d.N; ++k) {
        const std::size_t n = plan.batch_size(k);
        if (n == 0) continue;
        const std::size_t c = component_of(k, model.cfg);
        Matrix<T> xb(n, model.cfg.h);
        std::vector<std::size_t> tok(n), slot(n);
        for (std::size_t r = 0; r < n; ++r) {
            const std::size_t pair = plan.order[plan.offsets[k] + r];
            tok[r] = pair / d.n_active;
            slot[r] = pair % d.n_active;
            const auto src = x.row(tok[r]);
            std::copy(src.begin(), src.end(), xb.row(r).begin());
        }
        SwigluTrace<T> trace;
        const Matrix<T> e = swiglu_forward(xb, model.experts[k], &trace);
        Matrix<T> de(n, d.h_e);
        for (std::size_t r = 0; r < n; ++r) {
            const T w = decision.prob(tok[r], slot[r]);
            T dw{0};
            for (std::size_t j = 0; j < d.h_e; ++j) {
                const T up = dsparse(tok[r], c * d.h_e + j);
                de(r, j) = w * up;
                dw += up * e(r, j);
            }
            dscore(tok[r], k) += dw;
        }
        Matrix<T> dxb(n, model.cfg.h);
        swiglu_backward(xb, model.experts[k], trace, de, g.params.experts[k], dxb);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < model.cfg.h; ++i) g.dx(tok[r], i) += dxb(r, i);
    }

    // Router: selected scores (and any extra score gradient) through the softmax.
    if (score_grad) dscore += *score_grad;
    const Matrix<T> dlogits = softmax_backward(decision.score, dscore);
    g.params.router.w += matmul(x.transposed(), dlogits);
    g.dx += matmul(dlogits, model.router.w.transposed());
    return g;
}

// ---------------------------------------------------------------------------
// Losses used for training and gradient checks

/// weight_mse * mean(y^2) + balance loss with coefficient balance_alpha.
struct LayerLoss {
    double mse_weight = 1.0;
    double balance_alpha = 0.0;
};

template <class T>
struct LossEvaluation {
    LossScalar<T> value = 0;
    LossScalar<T> mse = 0;
    LossScalar<T> balance = 0;
    LayerOutput<T> output;
};

template <class T>
LossEvaluation<T> evaluate_loss(const Matrix<T>& x, const MoEModel<T>& model, const LayerLoss& loss,
                                const Matrix<T>* target = nullptr) {
    using S = LossScalar<T>;
    LossEvaluation<T> ev{0, 0, 0, forward(x, model)};
    const Matrix<T>& y = ev.output.y;
    S sq = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const S diff = static_cast<S>(y.values()[i]) - (target ? static_cast<S>(target->values()[i]) : S{0});
        sq += diff * diff;
    }
    ev.mse = sq / static_cast<S>(y.size());
    if (loss.balance_alpha != 0.0) ev.balance = detail::balance_loss_value(ev.output.decision, loss.balance_alpha);
    ev.value = static_cast<S>(loss.mse_weight) * ev.mse + ev.balance;
    return ev;
}

template <class T>
LayerGradients<T> loss_gradients(const Matrix<T>& x, const MoEModel<T>& model, const LayerLoss& loss,
                                 const Matrix<T>* target = nullptr) {
    const LossEvaluation<T> ev = evaluate_loss(x, model, loss, target);
    const Matrix<T>& y = ev.output.y;
    Matrix<T> dy(y.rows(), y.cols());
    const double scale = 2.0 * loss.mse_weight / static_cast<double>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double diff = static_cast<double>(y.values()[i]) - (target ? static_cast<double>(target->values()[i]) : 0.0);
        dy.values()[i] = static_cast<T>(scale * diff);
    }
    if (loss.balance_alpha != 0.0) {
        const Matrix<T> sg = balance_loss_score_grad(ev.output.decision, loss.balance_alpha);
        return backward(x, model, dy, ev.output.decision, &sg);
    }
    return backward(x, model, dy, ev.output.decision);
}

/// Plain SGD: every parameter p -= lr * dL/dp.
template <class T>
void sgd_step(MoEModel<T>& model, const LayerGradients<T>& g, double lr) {
    auto step = [lr](Matrix<T>& p, const Matrix<T>& dp) {
        for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] -= static_cast<T>(lr) * dp.values()[i];
    };
    auto step_ffn = [&](auto& w, const auto& dw) {
        step(w.w1, dw.w1);
        step(w.wg, dw.wg);
        step(w.w2, dw.w2);
    };
    if (model.shared) step_ffn(*model.shared, *g.params.shared);
    for (std::size_t k = 0; k < model.experts.size(); ++k) step_ffn(model.experts[k], g.params.experts[k]);
    step(model.router.w, g.params.router.w);
    if (model.cc_router) step(model.cc_router->w, g.params.cc_router->w);
    if (model.concat_proj) step(*model.concat_proj, *g.params.concat_proj);
}

// ---------------------------------------------------------------------------
// Finite differences

/// (f(x + eps) - f(x - eps)) / (2 eps), restoring x afterwards. The nudge
/// and the difference are formed in the wider of T and double.
template <class T, class Fn>
double central_difference(T& coordinate, double eps, Fn&& f) {
    using S = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
    const T saved = coordinate;
    coordinate = static_cast<T>(static_cast<S>(saved) + static_cast<S>(eps));
    const S plus = static_cast<S>(f());
    coordinate = static_cast<T>(static_cast<S>(saved) - static_cast<S>(eps));
    const S minus = static_cast<S>(f());
    coordinate = saved;
    return static_cast<double>((plus - minus) / (S{2} * static_cast<S>(eps)));
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  ///< coordinates whose routing flips within the margin
    std::string worst;        ///< name of the coordinate with the largest error
};

struct FdOptions {
    double epsilon = 1e-6;
    double margin = 10.0;             ///< routing must be stable under +-margin*epsilon
    std::size_t per_matrix = 4;       ///< sampled entries per parameter matrix
    std::uint64_t seed = 0;
    double floor = 1e-8;
};

namespace detail {

template <class T>
struct NamedSlot {
    std::string name;
    Matrix<T>* value;
    const Matrix<T>* grad;
};

template <class T>
std::vector<NamedSlot<T>> parameter_slots(MoEModel<T>& m, const LayerGradients<T>& g, Matrix<T>& x) {
    std::vector<NamedSlot<T>> out;
    auto add_ffn = [&](const std::string& prefix, auto& w, const auto& gw) {
        out.push_back({prefix + ".w1", &w.w1, &gw.w1});
        out.push_back({prefix + ".wg", &w.wg, &gw.wg});
        out.push_back({prefix + ".w2", &w.w2, &gw.w2});
    };
    if (m.shared) add_ffn("shared", *m.shared, *g.params.shared);
    for (std::size_t k = 0; k < m.experts.size(); ++k) add_ffn("expert." + std::to_string(k), m.experts[k], g.params.experts[k]);
    out.push_back({"router.w", &m.router.w, &g.params.router.w});
    if (m.cc_router) out.push_back({"cc_router.w", &m.cc_router->w, &g.params.cc_router->w});
    if (m.concat_proj) out.push_back({"concat_proj.w", &*m.concat_proj, &*g.params.concat_proj});
    out.push_back({"x", &x, &g.dx});
    return out;
}

template <class T>
bool same_routing(const RoutingDecision<T>& a, const RoutingDecision<T>& b) {
    return a.final_mask == b.final_mask && a.cc_act == b.cc_act && a.sum_mask == b.sum_mask;
}

}  // namespace detail

/// Precision in which fd_check evaluates central differences. The analytic
/// gradients stay in the model's own type; differencing in extended precision
/// keeps rounding noise (about eps_mach |L| / epsilon) well below the smallest
/// gradients being checked.
using FdReference = long double;

/// Compares analytic gradients of `loss` with central differences on a random
/// sample of coordinates of every parameter matrix and of x. Coordinates whose
/// routing changes under a +-margin*epsilon nudge are skipped and counted.
template <class T>
FdReport fd_check(const Matrix<T>& x_in, const MoEModel<T>& model_in, const LayerLoss& loss, const FdOptions& opt = {}) {
    using R = FdReference;
    const LayerGradients<T> grads = loss_gradients(x_in, model_in, loss);
    const LayerGradients<R> grads_r{grads.params.template cast<R>(), grads.dx.template cast<R>()};
    MoEModel<R> model = model_in.template cast<R>();
    Matrix<R> x = x_in.template cast<R>();
    const RoutingDecision<R> base = route_tokens(x, model);
    // A routing that already differs between the two precisions sits on a tie;
    // nothing about it can be checked.
    const RoutingDecision<T> native = route_tokens(x_in, model_in);
    const bool consistent = base.final_mask == native.final_mask && base.cc_act == native.cc_act &&
                            base.sum_mask == native.sum_mask;
    Rng rng(opt.seed);
    FdReport rep;
    for (auto& slot : detail::parameter_slots(model, grads_r, x)) {
        const std::size_t n = slot.value->size();
        const std::size_t samples = std::min(opt.per_matrix, n);
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t at = static_cast<std::size_t>(rng.below(n));
            R& coord = slot.value->values()[at];
            const R saved = coord;
            bool stable = consistent;
            for (double sign : {1.0, -1.0}) {
                coord = saved + static_cast<R>(sign * opt.margin * opt.epsilon);
                stable = stable && detail::same_routing(base, route_tokens(x, model));
            }
            coord = saved;
            if (!stable) {
                ++rep.skipped;
                continue;
            }
            const double numeric = central_difference(coord, opt.epsilon, [&] { return evaluate_loss(x, model, loss).value; });
            const double analytic = static_cast<double>(slot.grad->values()[at]);
            const double err = relative_error(analytic, numeric, opt.floor);
            ++rep.checked;
            if (err >= rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst = slot.name + "[" + std::to_string(at) + "]";
            }
        }
    }
    return rep;
}

}  // namespace finermoe
