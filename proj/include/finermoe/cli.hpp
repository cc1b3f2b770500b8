// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand is deterministic given its inputs
// and --seed, independent of --threads (bench's timings excepted).

#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "finermoe/analysis.hpp"
#include "finermoe/checkpoint.hpp"
#include "finermoe/config.hpp"
#include "finermoe/loss_grad.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/upcycle.hpp"
#include "finermoe/verify.hpp"

namespace finermoe::cli {

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_failure, "cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw Error(ErrorCode::io_failure, "write to '" + path + "' failed");
}

inline FineRConfig config_from(const std::string& config_path, const std::string& preset, std::size_t h, std::size_t H) {
    if (!config_path.empty()) return load_config(config_path);
    if (!preset.empty()) {
        FineRConfig c = baseline_preset(preset, h ? h : kReferenceHidden, H ? H : kReferenceIntermediate);
        validate(c);
        return c;
    }
    throw Error(ErrorCode::invalid_argument, "either --config or --preset is required");
}

inline unsigned threads_from_env() {
    if (const char* env = std::getenv("FINERMOE_THREADS")) {
        try {
            const long n = std::stol(env);
            if (n > 0) return static_cast<unsigned>(n);
        } catch (const std::exception&) {
        }
    }
    return 1;
}

/// Teacher-student regression used by train-demo: the student is upcycled from
/// a different random dense FFN and trained with SGD on MSE + balance loss.
inline std::string train_demo(const FineRConfig& cfg, std::size_t steps, std::size_t tokens, double lr,
                              std::uint64_t seed) {
    Rng rng(seed);
    const auto teacher = random_ffn<float, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.2);
    const auto donor = random_ffn<float, DenseTag>(cfg.h, cfg.H, cfg.h, rng, 0.2);
    MoEModel<float> student = upcycle(donor, cfg, seed + 1);
    const LayerLoss loss{1.0, kBalanceAlpha};
    std::ostringstream csv;
    csv << "step,lm_loss,balance_loss,total_loss\n";
    for (std::size_t step = 0; step < steps; ++step) {
        const Matrix<float> x = random_normal<float>(tokens, cfg.h, rng);
        const Matrix<float> y = oracle::dense_ffn_forward(x, teacher);
        const auto ev = evaluate_loss(x, student, loss, &y);
        csv << step << ',' << fmt(ev.mse) << ',' << fmt(ev.balance) << ',' << fmt(ev.value) << '\n';
        sgd_step(student, loss_gradients(x, student, loss, &y), lr);
    }
    return csv.str();
}

}  // namespace detail

/// Runs the CLI on argv-style arguments (without the program name).
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"finermoe: bi-level fine-grained mixture-of-experts layer toolkit", "finermoe"};
    app.require_subcommand(1);
    // --h is the hidden width, so help is long-form only (subcommands inherit this).
    app.set_help_flag("--help", "print this help and exit");
    unsigned threads = 0;
    app.add_option("--threads", threads, "worker threads (default: $FINERMOE_THREADS or 1)");

    std::string config_path, preset_name, dense_path, model_path, out_path, input_path, csv_path, suite = "all";
    std::size_t h = 0, H = 0, tokens = 0, repeats = 3, steps = 300, experts = 8, active = 2;
    std::uint64_t seed = 0;
    double drop_ratio = -1.0, lr = 0.05;
    bool reference_scale = false;

    auto* init_dense = app.add_subcommand("init-dense", "write a random dense FFN (FRM1)");
    init_dense->add_option("--h", h, "hidden dim")->required();
    init_dense->add_option("--H", H, "intermediate dim")->required();
    init_dense->add_option("--seed", seed);
    init_dense->add_option("--out", out_path)->required();

    auto* preset = app.add_subcommand("preset", "print a baseline config");
    preset->add_option("--name", preset_name, "C32A2 | S16A4 | NVShard | FineRMoE-base")->required();
    preset->add_option("--h", h);
    preset->add_option("--H", H);
    preset->add_option("--out", out_path);

    auto* upcycle_cmd = app.add_subcommand("upcycle", "convert a dense FFN into a MoE layer");
    upcycle_cmd->add_option("--config", config_path);
    upcycle_cmd->add_option("--preset", preset_name);
    upcycle_cmd->add_option("--dense", dense_path)->required();
    upcycle_cmd->add_option("--out", out_path)->required();
    upcycle_cmd->add_option("--seed", seed);
    upcycle_cmd->add_option("--drop-ratio", drop_ratio, "replicate-and-reinitialize baseline instead of slicing");
    upcycle_cmd->add_option("--experts", experts, "expert count for --drop-ratio");
    upcycle_cmd->add_option("--active", active, "activated experts for --drop-ratio");

    auto* forward_cmd = app.add_subcommand("forward", "run the layer on a raw f32 matrix");
    forward_cmd->add_option("--model", model_path)->required();
    forward_cmd->add_option("--input", input_path)->required();
    forward_cmd->add_option("--output", out_path)->required();

    auto* stats = app.add_subcommand("route-stats", "routing load over random tokens");
    stats->add_option("--model", model_path)->required();
    stats->add_option("--tokens", tokens)->required();
    stats->add_option("--seed", seed);
    stats->add_option("--csv", csv_path, "per-expert CSV: expert,count,f");

    auto* sim = app.add_subcommand("similarity", "mean pairwise cosine similarity of experts");
    sim->add_option("--model", model_path)->required();
    sim->add_option("--csv", csv_path, "per-pair CSV: a,b,cosine");

    auto* cost = app.add_subcommand("cost", "parameter and FLOP accounting");
    cost->add_option("--config", config_path);
    cost->add_option("--preset", preset_name);
    cost->add_flag("--reference-scale", reference_scale, "scale to the 28-layer 1.5B reference model");

    auto* bench = app.add_subcommand("bench", "time the sparse path");
    bench->add_option("--config", config_path);
    bench->add_option("--preset", preset_name);
    bench->add_option("--h", h);
    bench->add_option("--H", H);
    bench->add_option("--tokens", tokens);
    bench->add_option("--repeats", repeats);
    bench->add_option("--seed", seed);

    auto* check = app.add_subcommand("check", "run oracle suites");
    check->add_option("--suite", suite, "reconstruction | router-equivalence | round-trip | fd-gradient | all");
    check->add_option("--config", config_path)->required();
    check->add_option("--seed", seed);

    auto* train = app.add_subcommand("train-demo", "toy teacher-student training with balance loss");
    train->add_option("--config", config_path)->required();
    train->add_option("--steps", steps);
    train->add_option("--tokens", tokens);
    train->add_option("--lr", lr);
    train->add_option("--seed", seed);
    train->add_option("--csv", csv_path);

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    ScopedThreads scoped(threads ? threads : detail::threads_from_env());
    try {
        if (*init_dense) {
            Rng rng(seed);
            write_model(random_ffn<float, DenseTag>(h, H, h, rng, 0.02), out_path);
            out << "wrote " << out_path << '\n';
        } else if (*preset) {
            const FineRConfig c = baseline_preset(preset_name, h ? h : kReferenceHidden, H ? H : kReferenceIntermediate);
            validate(c);
            const std::string text = to_config_text(c);
            if (out_path.empty()) out << text;
            else detail::write_text(out_path, text);
        } else if (*upcycle_cmd) {
            const DenseFfnWeights<float> dense = read_dense(dense_path);
            MoEModel<float> m;
            if (drop_ratio >= 0.0) {
                m = drop_upcycle(dense, experts, drop_ratio, active, seed);
            } else {
                m = upcycle(dense, detail::config_from(config_path, preset_name, dense.in_dim(), dense.inter_dim()), seed);
            }
            write_model(m, out_path);
            const DerivedDims d = m.dims();
            out << "experts = " << d.N << "\nactivated = " << d.n_active << "\nwrote = " << out_path << '\n';
        } else if (*forward_cmd) {
            const MoEModel<float> m = read_moe(model_path);
            const Matrix<float> x = read_matrix_file(input_path);
            write_matrix_file(forward(x, m).y, out_path);
            out << "rows = " << x.rows() << "\ncols = " << m.cfg.h << "\nwrote = " << out_path << '\n';
        } else if (*stats) {
            const MoEModel<float> m = read_moe(model_path);
            Rng rng(seed);
            const Matrix<float> x = random_normal<float>(tokens, m.cfg.h, rng);
            const LoadReport r = route_stats(route_tokens(x, m));
            std::size_t total = 0;
            for (auto c : r.counts) total += c;
            out << "tokens = " << r.tokens << "\nexperts = " << r.counts.size() << "\nactivations = " << total
                << "\nmax_f = " << detail::fmt(r.imbalance)
                << "\nmin_f = " << detail::fmt(*std::min_element(r.f.begin(), r.f.end())) << '\n';
            if (!csv_path.empty()) {
                std::ostringstream csv;
                csv << "expert,count,f\n";
                for (std::size_t k = 0; k < r.counts.size(); ++k) csv << k << ',' << r.counts[k] << ',' << detail::fmt(r.f[k]) << '\n';
                detail::write_text(csv_path, csv.str());
            }
        } else if (*sim) {
            const MoEModel<float> m = read_moe(model_path);
            const SimilarityReport r = expert_similarity(m, !csv_path.empty());
            out << "pairs = " << r.pair_count << "\nmean_cosine = " << detail::fmt(r.mean) << '\n';
            if (!csv_path.empty()) {
                std::ostringstream csv;
                csv << "a,b,cosine\n";
                std::size_t p = 0;
                for (std::size_t a = 0; a < m.experts.size(); ++a)
                    for (std::size_t b = a + 1; b < m.experts.size(); ++b) csv << a << ',' << b << ',' << detail::fmt(r.pairs[p++]) << '\n';
                detail::write_text(csv_path, csv.str());
            }
        } else if (*cost) {
            const FineRConfig c = detail::config_from(config_path, preset_name, 0, 0);
            const CostReport r = cost_report(c, 1, false, reference_scale ? std::optional(reference_1p5b_scale()) : std::nullopt);
            out << "layer_params = " << r.total_params << "\nlayer_activated_params = " << r.activated_params
                << "\nexpert_params = " << r.expert_params << "\nsparse_flops_per_token = " << r.sparse_flops
                << "\nshared_flops_per_token = " << r.shared_flops << "\nrouter_flops_per_token = " << r.router_flops << '\n';
            if (reference_scale) {
                out << "model_params = " << r.model_total_params << "\nmodel_activated_params = " << r.model_activated_params << '\n';
            }
        } else if (*bench) {
            const FineRConfig c = detail::config_from(config_path, preset_name, h, H);
            const CostReport r = cost_report(c, tokens ? tokens : 256, true, std::nullopt, seed);
            out << "sparse_flops_per_token = " << r.sparse_flops << "\nwall_ns_per_token = " << detail::fmt(*r.wall_ns_per_token) << '\n';
        } else if (*check) {
            const FineRConfig c = load_config(config_path);
            std::vector<std::string> suites = suite == "all" ? verify::suite_names() : std::vector<std::string>{suite};
            bool all_ok = true;
            for (const auto& name : suites) {
                const verify::SuiteResult r = verify::run_suite(name, c, seed);
                all_ok = all_ok && r.passed;
                out << r.name << ": " << (r.passed ? "PASS" : "FAIL") << " metric = " << detail::fmt(r.metric)
                    << " threshold = " << detail::fmt(r.threshold) << " (" << r.detail << ")\n";
            }
            out << (all_ok ? "PASS" : "FAIL") << '\n';
            return all_ok ? 0 : 1;
        } else if (*train) {
            const FineRConfig c = load_config(config_path);
            const std::string csv = detail::train_demo(c, steps, tokens ? tokens : 32, lr, seed);
            if (csv_path.empty()) out << csv;
            else {
                detail::write_text(csv_path, csv);
                out << "steps = " << steps << "\nwrote = " << csv_path << '\n';
            }
        }
    } catch (const Error& e) {
        err << "error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace finermoe::cli
