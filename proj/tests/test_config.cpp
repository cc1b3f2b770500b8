// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <array>
#include <fstream>

#include "finermoe/config.hpp"
#include "test_support.hpp"

namespace finermoe {
namespace {

struct AblationRow {
    std::size_t G_I, G_O, experts, active, inter, out;
};

// Fine-grained ablation grid at h=1536, H=8960, R_I=1, R_O=2, T_I=1.
constexpr std::array<AblationRow, 14> kAblation = {{
    {2, 2, 8, 2, 4480, 768},    {4, 2, 16, 2, 2240, 768},  {4, 4, 32, 4, 2240, 384},
    {8, 2, 32, 2, 1120, 768},   {8, 4, 64, 4, 1120, 384},  {16, 2, 64, 2, 560, 768},
    {16, 4, 128, 4, 560, 384},  {16, 8, 256, 8, 560, 192}, {32, 2, 128, 2, 280, 768},
    {32, 4, 256, 4, 280, 384},  {32, 8, 512, 8, 280, 192}, {64, 2, 256, 2, 140, 768},
    {64, 4, 512, 4, 140, 384},  {64, 8, 1024, 8, 140, 192},
}};

FineRConfig ablation_config(const AblationRow& r) {
    FineRConfig c;
    c.h = kReferenceHidden;
    c.H = kReferenceIntermediate;
    c.G_I = r.G_I;
    c.G_O = r.G_O;
    c.R_O = 2;
    return c;
}

TEST(Derive, AblationGrid) {
    for (const auto& r : kAblation) {
        const FineRConfig c = ablation_config(r);
        ASSERT_NO_THROW(validate(c)) << r.G_I << "/" << r.G_O;
        const DerivedDims d = derive(c);
        EXPECT_EQ(d.N, r.experts) << r.G_I << "/" << r.G_O;
        EXPECT_EQ(d.n_active, r.active);
        EXPECT_EQ(d.H_e, r.inter);
        EXPECT_EQ(d.h_e, r.out);
    }
}

TEST(Derive, BaseConfig) {
    const DerivedDims d = derive(baseline_preset("FineRMoE-base"));
    EXPECT_EQ(d.H_e, 280u);
    EXPECT_EQ(d.h_e, 768u);
    EXPECT_EQ(d.N, 128u);
    EXPECT_EQ(d.n_active, 2u);
    EXPECT_EQ(d.n_groups, 4u);
    EXPECT_EQ(d.group_size, 32u);
}

TEST(Derive, DegenerateSingleExpert) {
    FineRConfig c;
    c.h = 6;
    c.H = 10;
    const DerivedDims d = derive(c);
    EXPECT_EQ(d.N, 1u);
    EXPECT_EQ(d.H_e, 10u);
    EXPECT_EQ(d.h_e, 6u);
}

TEST(Derive, InvariantsOnRandomValidConfigs) {
    Rng rng(17);
    int valid = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        FineRConfig c;
        c.G_I = 1 + rng.below(8);
        c.R_I = 1 + rng.below(4);
        c.G_O = 1 + rng.below(8);
        c.R_O = 1 + rng.below(4);
        c.T_I = 1 + rng.below(6);
        c.H = c.G_I * (1 + rng.below(5)) + (rng.below(4) == 0 ? 1 : 0);
        c.h = c.G_O * (1 + rng.below(5)) + (rng.below(4) == 0 ? 1 : 0);
        const bool expect_ok = c.H % c.G_I == 0 && c.h % c.G_O == 0 && c.T_I <= c.G_I * c.R_I;
        ASSERT_EQ(is_valid(c), expect_ok);
        if (!expect_ok) continue;
        ++valid;
        const DerivedDims d = derive(c);
        EXPECT_EQ(d.N, c.G_O * c.R_O * c.G_I * c.R_I);
        EXPECT_EQ(d.H_e * c.G_I, c.H);
        EXPECT_EQ(d.h_e * c.G_O, c.h);
        EXPECT_EQ(d.n_groups * d.group_size, d.N);
        // Indexing covers every (component, candidate) group exactly group_size times.
        std::vector<std::size_t> per_group(d.n_groups, 0);
        for (std::size_t k = 0; k < d.N; ++k) {
            const std::size_t g = group_of(k, c);
            ASSERT_EQ(g, group_index(component_of(k, c), candidate_of(k, c), c));
            ASSERT_LT(component_of(k, c), c.G_O);
            ASSERT_LT(candidate_of(k, c), c.R_O);
            ++per_group[g];
        }
        for (auto n : per_group) EXPECT_EQ(n, d.group_size);
    }
    EXPECT_GT(valid, 200);
}

void expect_invalid(const FineRConfig& c, const std::string& fragment) {
    try {
        validate(c);
        FAIL() << "expected invalid config: " << fragment;
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_config);
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

TEST(Validate, NamedErrors) {
    FineRConfig c = baseline_preset("FineRMoE-base");
    c.G_I = 3;
    expect_invalid(c, "G_I must divide H");
    c = baseline_preset("FineRMoE-base");
    c.G_O = 5;
    expect_invalid(c, "G_O must divide h");
    FineRConfig t;
    t.h = 4;
    t.H = 4;
    t.R_I = 2;
    t.T_I = 3;
    expect_invalid(t, "T_I exceeds group size");
    t.T_I = 0;
    expect_invalid(t, "T_I must be >= 1");
    t.T_I = 1;
    t.R_O = 0;
    expect_invalid(t, "R_O must be >= 1");
    t.R_O = 1;
    t.h = 0;
    expect_invalid(t, "h must be positive");
    EXPECT_NO_THROW(validate(baseline_preset("FineRMoE-base")));
}

TEST(Presets, Values) {
    const auto c32 = baseline_preset("C32A2");
    EXPECT_EQ(derive(c32).N, 32u);
    EXPECT_EQ(derive(c32).n_active, 2u);
    EXPECT_TRUE(c32.share_expert);
    const auto s16 = baseline_preset("S16A4");
    EXPECT_EQ(derive(s16).N, 16u);
    EXPECT_EQ(derive(s16).n_active, 4u);
    EXPECT_FALSE(s16.share_expert);
    const auto nv = baseline_preset("NVShard");
    EXPECT_EQ(derive(nv).N, 64u);
    EXPECT_EQ(derive(nv).n_active, 8u);
    const auto base = baseline_preset("FineRMoE-base");
    EXPECT_EQ(derive(base).N, 128u);
    EXPECT_EQ(derive(base).n_active, 2u);
    for (auto name : kPresetNames) EXPECT_NO_THROW(validate(baseline_preset(name)));
}

TEST(Presets, UnknownNameListsValidOnes) {
    try {
        baseline_preset("C64A8");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unknown_preset);
        for (auto name : kPresetNames) EXPECT_NE(std::string(e.what()).find(name), std::string::npos);
    }
}

TEST(ConfigText, RoundTrip) {
    FineRConfig c = testing::tiny_config(2, 3, 2, 2, 2);
    c.router_mode = RouterMode::separate;
    c.concat_proj = true;
    c.share_expert = false;
    EXPECT_EQ(parse_config_text(to_config_text(c)), c);
}

TEST(ConfigText, CommentsAndDefaults) {
    const auto c = parse_config_text("# tiny\nh = 8  # hidden\n\nH=16\nG_O = 2\nR_O = 2\n");
    EXPECT_EQ(c.h, 8u);
    EXPECT_EQ(c.H, 16u);
    EXPECT_EQ(c.G_I, 1u);
    EXPECT_EQ(derive(c).N, 4u);
}

TEST(ConfigText, Rejections) {
    EXPECT_THROW(parse_config_text("h = 8\nH = 8\nbogus = 1\n"), Error);
    EXPECT_THROW(parse_config_text("h = 8\nH = 8\nG_I = -1\n"), Error);
    EXPECT_THROW(parse_config_text("h = 8\nH = 8\nrouter_mode = both\n"), Error);
    EXPECT_THROW(parse_config_text("h = 8\nH = 9\nG_I = 2\n"), Error);
    EXPECT_THROW(parse_config_text("just words\n"), Error);
}

TEST(ConfigText, LoadFromFile) {
    testing::TempDir dir;
    const auto path = dir.file("c.cfg");
    std::ofstream(path) << to_config_text(baseline_preset("NVShard", 16, 64));
    EXPECT_EQ(load_config(path), baseline_preset("NVShard", 16, 64));
    try {
        load_config(dir.file("missing.cfg"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::io_failure);
    }
}

}  // namespace
}  // namespace finermoe
