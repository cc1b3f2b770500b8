// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer hyper-parameters and the dimensions derived from them. Also the
// baseline presets and the flat `key = value` config text format.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "finermoe/numerics.hpp"

namespace finermoe {

enum class RouterMode { single, separate };

inline std::string to_string(RouterMode m) { return m == RouterMode::single ? "single" : "separate"; }

/// The four granularity / expansion hyper-parameters plus base dims and the
/// architectural variant switches.
///
///   G_I = H / H_e            intermediate granularity
///   R_I = N_g * H_e / H      intermediate expansion rate (experts per group = G_I * R_I)
///   G_O = h / h_e            output granularity (concatenation components)
///   R_O                      candidate vectors per component
///   T_I                      experts activated inside each group
struct FineRConfig {
    std::size_t h = 0;
    std::size_t H = 0;
    std::size_t G_I = 1;
    std::size_t R_I = 1;
    std::size_t G_O = 1;
    std::size_t R_O = 1;
    std::size_t T_I = 1;
    RouterMode router_mode = RouterMode::single;
    bool share_expert = true;
    bool concat_proj = false;

    bool operator==(const FineRConfig&) const = default;
};

struct DerivedDims {
    std::size_t H_e = 0;         ///< expert intermediate dim, H / G_I
    std::size_t h_e = 0;         ///< expert output dim, h / G_O
    std::size_t N = 0;           ///< total sparse experts, G_O * R_O * G_I * R_I
    std::size_t n_groups = 0;    ///< G_O * R_O
    std::size_t group_size = 0;  ///< G_I * R_I
    std::size_t n_active = 0;    ///< G_O * T_I

    bool operator==(const DerivedDims&) const = default;
};

/// Throws Error(invalid_config) naming the first violated constraint.
inline void validate(const FineRConfig& c) {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_config, msg); };
    if (c.h == 0) fail("h must be positive");
    if (c.H == 0) fail("H must be positive");
    if (c.G_I == 0) fail("G_I must be >= 1");
    if (c.R_I == 0) fail("R_I must be >= 1");
    if (c.G_O == 0) fail("G_O must be >= 1");
    if (c.R_O == 0) fail("R_O must be >= 1");
    if (c.T_I == 0) fail("T_I must be >= 1");
    if (c.H % c.G_I != 0) fail("G_I must divide H (G_I=" + std::to_string(c.G_I) + ", H=" + std::to_string(c.H) + ")");
    if (c.h % c.G_O != 0) fail("G_O must divide h (G_O=" + std::to_string(c.G_O) + ", h=" + std::to_string(c.h) + ")");
    if (c.T_I > c.G_I * c.R_I) {
        fail("T_I exceeds group size (T_I=" + std::to_string(c.T_I) + ", G_I*R_I=" + std::to_string(c.G_I * c.R_I) + ")");
    }
}

inline bool is_valid(const FineRConfig& c) {
    try {
        validate(c);
        return true;
    } catch (const Error&) {
        return false;
    }
}

inline DerivedDims derive(const FineRConfig& c) {
    DerivedDims d;
    d.H_e = c.H / c.G_I;
    d.h_e = c.h / c.G_O;
    d.group_size = c.G_I * c.R_I;
    d.n_groups = c.G_O * c.R_O;
    d.N = d.n_groups * d.group_size;
    d.n_active = c.G_O * c.T_I;
    return d;
}

// ---------------------------------------------------------------------------
// Expert indexing. Expert k belongs to group floor(k / (G_I R_I)); groups are
// laid out component-major, so group g is candidate (g mod R_O) of output
// component floor(g / R_O).

inline std::size_t group_of(std::size_t k, const FineRConfig& c) noexcept { return k / (c.G_I * c.R_I); }
inline std::size_t component_of(std::size_t k, const FineRConfig& c) noexcept { return k / (c.G_I * c.R_I * c.R_O); }
inline std::size_t candidate_of(std::size_t k, const FineRConfig& c) noexcept {
    return (k % (c.G_I * c.R_I * c.R_O)) / (c.G_I * c.R_I);
}
inline std::size_t group_index(std::size_t component, std::size_t candidate, const FineRConfig& c) noexcept {
    return component * c.R_O + candidate;
}

// ---------------------------------------------------------------------------
// Presets

/// Base dims of the 1.5B dense reference model the presets are defined against.
inline constexpr std::size_t kReferenceHidden = 1536;
inline constexpr std::size_t kReferenceIntermediate = 8960;

inline constexpr std::array<std::string_view, 4> kPresetNames = {"C32A2", "S16A4", "NVShard", "FineRMoE-base"};

/// Baseline constructions expressed as (G_I, R_I, G_O, R_O). For the
/// G_O = R_O = 1 baselines the single group makes the router a plain top-k,
/// so T_I carries the baseline's activation count.
inline FineRConfig baseline_preset(std::string_view name, std::size_t h = kReferenceHidden,
                                   std::size_t H = kReferenceIntermediate) {
    FineRConfig c;
    c.h = h;
    c.H = H;
    if (name == "C32A2") {
        c.G_I = 1, c.R_I = 32, c.G_O = 1, c.R_O = 1, c.T_I = 2;
    } else if (name == "S16A4") {
        c.G_I = 16, c.R_I = 1, c.G_O = 1, c.R_O = 1, c.T_I = 4;
        c.share_expert = false;
    } else if (name == "NVShard") {
        c.G_I = 8, c.R_I = 8, c.G_O = 1, c.R_O = 1, c.T_I = 8;
    } else if (name == "FineRMoE-base") {
        c.G_I = 32, c.R_I = 1, c.G_O = 2, c.R_O = 2, c.T_I = 1;
    } else {
        std::string valid;
        for (auto n : kPresetNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
        throw Error(ErrorCode::unknown_preset, "unknown preset '" + std::string(name) + "'; valid presets: " + valid);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Text format: one `key = value` per line, '#' starts a comment.

inline std::string to_config_text(const FineRConfig& c) {
    std::ostringstream os;
    os << "h = " << c.h << '\n'
       << "H = " << c.H << '\n'
       << "G_I = " << c.G_I << '\n'
       << "R_I = " << c.R_I << '\n'
       << "G_O = " << c.G_O << '\n'
       << "R_O = " << c.R_O << '\n'
       << "T_I = " << c.T_I << '\n'
       << "router_mode = " << to_string(c.router_mode) << '\n'
       << "share_expert = " << (c.share_expert ? "true" : "false") << '\n'
       << "concat_proj = " << (c.concat_proj ? "true" : "false") << '\n';
    return os.str();
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(std::string_view key, std::string_view v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw Error(ErrorCode::invalid_config, "config key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
}

inline bool parse_flag(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw Error(ErrorCode::invalid_config, "config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

}  // namespace detail

/// Parses the key = value format. Unknown keys are rejected; missing keys keep
/// their defaults. The result is validated.
inline FineRConfig parse_config_text(std::string_view text) {
    FineRConfig c;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw Error(ErrorCode::invalid_config, "config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = detail::trim(line.substr(0, eq));
        const auto val = detail::trim(line.substr(eq + 1));
        if (key == "h") c.h = detail::parse_count(key, val);
        else if (key == "H") c.H = detail::parse_count(key, val);
        else if (key == "G_I") c.G_I = detail::parse_count(key, val);
        else if (key == "R_I") c.R_I = detail::parse_count(key, val);
        else if (key == "G_O") c.G_O = detail::parse_count(key, val);
        else if (key == "R_O") c.R_O = detail::parse_count(key, val);
        else if (key == "T_I") c.T_I = detail::parse_count(key, val);
        else if (key == "share_expert") c.share_expert = detail::parse_flag(key, val);
        else if (key == "concat_proj") c.concat_proj = detail::parse_flag(key, val);
        else if (key == "router_mode") {
            if (val == "single") c.router_mode = RouterMode::single;
            else if (val == "separate") c.router_mode = RouterMode::separate;
            else throw Error(ErrorCode::invalid_config, "router_mode must be 'single' or 'separate'");
        } else {
            throw Error(ErrorCode::invalid_config, "unknown config key '" + std::string(key) + "'");
        }
    }
    validate(c);
    return c;
}

inline FineRConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io_failure, "cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace finermoe
