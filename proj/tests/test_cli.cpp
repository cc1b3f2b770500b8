// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "finermoe/cli.hpp"
#include "test_support.hpp"

namespace finermoe {
namespace {

struct Outcome {
    int code;
    std::string out, err;
};

Outcome run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(std::move(args), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Value of "key = value" in a report.
std::string field(const std::string& report, const std::string& key) {
    std::istringstream in(report);
    std::string line;
    while (std::getline(in, line))
        if (line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
    return {};
}

class CliTest : public ::testing::Test {
protected:
    testing::TempDir dir;

    std::string make_model(const std::string& preset, const std::string& threads = "1") {
        const auto dense = dir.file("dense.frm");
        const auto model = dir.file(preset + threads + ".frm");
        EXPECT_EQ(run({"--threads", threads, "init-dense", "--h", "32", "--H", "128", "--seed", "4", "--out", dense}).code, 0);
        const auto r = run({"--threads", threads, "upcycle", "--preset", preset, "--dense", dense, "--out", model, "--seed", "5"});
        EXPECT_EQ(r.code, 0) << r.err;
        return model;
    }
};

TEST_F(CliTest, PresetPrintsParsableConfig) {
    const auto r = run({"preset", "--name", "NVShard", "--h", "32", "--H", "128"});
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(parse_config_text(r.out), baseline_preset("NVShard", 32, 128));
}

TEST_F(CliTest, UpcycleReportsCounts) {
    const auto dense = dir.file("d.frm");
    ASSERT_EQ(run({"init-dense", "--h", "32", "--H", "128", "--out", dense}).code, 0);
    const auto r = run({"upcycle", "--preset", "FineRMoE-base", "--dense", dense, "--out", dir.file("m.frm")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "experts"), "128");
    EXPECT_EQ(field(r.out, "activated"), "2");
    EXPECT_EQ(read_moe(dir.file("m.frm")).experts.size(), 128u);

    const auto d = run({"upcycle", "--dense", dense, "--out", dir.file("drop.frm"), "--drop-ratio", "0.5", "--experts", "8", "--active", "2"});
    ASSERT_EQ(d.code, 0) << d.err;
    EXPECT_EQ(field(d.out, "experts"), "8");
}

TEST_F(CliTest, ForwardMatchesLibrary) {
    const auto model = make_model("C32A2");
    Rng rng(8);
    const auto x = random_normal<float>(9, 32, rng);
    write_matrix_file(x, dir.file("x.mat"));
    const auto r = run({"forward", "--model", model, "--input", dir.file("x.mat"), "--output", dir.file("y.mat")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_matrix_file(dir.file("y.mat")), forward(x, read_moe(model)).y);
}

TEST_F(CliTest, RouteStatsCountsEveryActivation) {
    const auto model = make_model("NVShard");
    const auto r = run({"route-stats", "--model", model, "--tokens", "300", "--csv", dir.file("s.csv")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "activations"), std::to_string(300 * 8));
    const auto csv = slurp(dir.file("s.csv"));
    EXPECT_EQ(csv.rfind("expert,count,f\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 65);
}

TEST_F(CliTest, SimilarityOfReplicas) {
    const auto r = run({"similarity", "--model", make_model("C32A2")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "pairs"), "496");
    EXPECT_EQ(field(r.out, "mean_cosine"), "1");
}

TEST_F(CliTest, CostAtReferenceScale) {
    const auto r = run({"cost", "--preset", "FineRMoE-base", "--reference-scale"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(field(r.out, "model_params"), "5636109824");
    EXPECT_EQ(field(r.out, "model_activated_params"), "1842804224");
}

TEST_F(CliTest, BenchReportsTiming) {
    const auto r = run({"bench", "--preset", "S16A4", "--h", "64", "--H", "256", "--tokens", "16", "--repeats", "1"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_GT(std::stod(field(r.out, "wall_ns_per_token")), 0.0);
}

TEST_F(CliTest, CheckSuitesPass) {
    const auto cfg = dir.file("t.cfg");
    std::ofstream(cfg) << to_config_text(testing::tiny_config(2, 1, 2, 2, 1, 8, 16));
    const auto r = run({"check", "--config", cfg, "--seed", "3"});
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    EXPECT_NE(r.out.find("\nPASS\n"), std::string::npos);
}

TEST_F(CliTest, TrainDemoLossFalls) {
    const auto cfg = dir.file("t.cfg");
    std::ofstream(cfg) << to_config_text(testing::tiny_config(2, 1, 2, 2, 1, 8, 16));
    const auto r = run({"train-demo", "--config", cfg, "--steps", "200", "--tokens", "32"});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(r.out);
    std::string line;
    std::vector<double> mse;
    std::getline(in, line);
    EXPECT_EQ(line, "step,lm_loss,balance_loss,total_loss");
    while (std::getline(in, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        mse.push_back(std::stod(line.substr(a + 1, b - a - 1)));
    }
    ASSERT_EQ(mse.size(), 200u);
    const auto mean = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 20; ++i) s += mse[i];
        return s / 20;
    };
    EXPECT_LT(mean(180), mean(0));
}

TEST_F(CliTest, ErrorsExitWithTwo) {
    const auto missing = run({"similarity", "--model", dir.file("nope.frm")});
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("error (I/O failure)"), std::string::npos) << missing.err;

    const auto preset = run({"preset", "--name", "C64A8"});
    EXPECT_EQ(preset.code, 2);
    EXPECT_NE(preset.err.find("error (unknown preset)"), std::string::npos);

    const auto bad = dir.file("bad.cfg");
    std::ofstream(bad) << "h = 8\nH = 9\nG_I = 2\n";
    const auto invalid = run({"cost", "--config", bad});
    EXPECT_EQ(invalid.code, 2);
    EXPECT_NE(invalid.err.find("error (invalid config)"), std::string::npos);

    const auto noconf = run({"cost"});
    EXPECT_EQ(noconf.code, 2);
    EXPECT_NE(run({"frobnicate"}).code, 0);
}

TEST_F(CliTest, OutputsIndependentOfThreads) {
    const auto m1 = make_model("FineRMoE-base", "1");
    const auto m4 = make_model("FineRMoE-base", "4");
    EXPECT_EQ(slurp(m1), slurp(m4));
    Rng rng(2);
    write_matrix_file(random_normal<float>(50, 32, rng), dir.file("x.mat"));
    std::vector<std::string> outs;
    for (const char* t : {"1", "4", "1"}) {
        const auto y = dir.file(std::string("y") + t + ".mat");
        ASSERT_EQ(run({"--threads", t, "forward", "--model", m1, "--input", dir.file("x.mat"), "--output", y}).code, 0);
        const auto s = run({"--threads", t, "route-stats", "--model", m1, "--tokens", "200", "--seed", "9"});
        outs.push_back(slurp(y) + s.out);
    }
    EXPECT_EQ(outs[0], outs[1]);
    EXPECT_EQ(outs[0], outs[2]);
}

}  // namespace
}  // namespace finermoe
