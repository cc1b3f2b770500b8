// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "finermoe/numerics.hpp"

namespace finermoe {
namespace {

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const MatrixF a{{1.5f, -2.f, 3.f}, {0.25f, 4.f, -1.f}};
    EXPECT_EQ(matmul(MatrixF::identity(2), a), a);
    EXPECT_EQ(matmul(a, MatrixF::identity(3)), a);
}

TEST(Matmul, HandExample) {
    const MatrixF a{{1.f, 2.f}, {3.f, 4.f}};
    const MatrixF b{{1.f}, {1.f}};
    EXPECT_EQ(matmul(a, b), (MatrixF{{3.f}, {7.f}}));
}

TEST(Matmul, DimensionMismatchNamesBothShapes) {
    const MatrixF a(1, 3);
    const MatrixF b(2, 2);
    try {
        matmul(a, b);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::shape_mismatch);
        EXPECT_NE(std::string(e.what()).find("1x3"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("2x2"), std::string::npos);
    }
}

TEST(Matmul, BitIdenticalAcrossThreadCounts) {
    Rng rng(11);
    const auto a = random_normal<float>(67, 129, rng);
    const auto b = random_normal<float>(129, 45, rng);
    MatrixF one, many;
    {
        ScopedThreads t(1);
        one = matmul(a, b);
    }
    {
        ScopedThreads t(4);
        many = matmul(a, b);
    }
    EXPECT_EQ(one, many);
}

TEST(Matmul, WideAccumulationTracksDoubleReference) {
    Rng rng(3);
    const auto a = random_normal<float>(5, 4000, rng);
    const auto b = random_normal<float>(4000, 3, rng);
    const auto wide = matmul(a, b, Accumulation::wide);
    const auto ref = matmul(a.cast<double>(), b.cast<double>());
    for (std::size_t i = 0; i < wide.size(); ++i) {
        EXPECT_EQ(wide.values()[i], static_cast<float>(ref.values()[i]));
    }
}

TEST(Silu, Values) {
    EXPECT_EQ(silu(0.0), 0.0);
    EXPECT_NEAR(silu(1.0), 0.7310585786300049, 1e-15);
    EXPECT_NEAR(silu(-20.0), -4.122307236380407e-08, 1e-20);
}

TEST(Silu, MonotoneAndBelowIdentityForNonNegative) {
    double prev = silu(0.0);
    for (double x = 0.01; x < 30.0; x += 0.01) {
        const double y = silu(x);
        EXPECT_GE(y, prev);
        EXPECT_LE(y, x);
        prev = y;
    }
}

TEST(Silu, GradientMatchesFiniteDifference) {
    for (double x : {-6.0, -1.3, 0.0, 0.4, 2.5, 9.0}) {
        const double fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
        EXPECT_NEAR(silu_grad(x), fd, 1e-8) << x;
    }
}

TEST(Softmax, Examples) {
    const auto s = softmax(std::vector<double>{0.7, 0.7});
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
    const auto t = softmax(std::vector<double>{0.0, std::log(3.0)});
    EXPECT_NEAR(t[0], 0.25, 1e-15);
    EXPECT_NEAR(t[1], 0.75, 1e-15);
    const auto u = softmax(std::vector<float>{1000.f, 0.f});
    EXPECT_TRUE(std::isfinite(u[0]) && std::isfinite(u[1]));
    EXPECT_NEAR(u[0], 1.0f, 1e-6f);
    EXPECT_NEAR(u[1], 0.0f, 1e-6f);
}

TEST(Softmax, EmptyInputIsAnError) {
    try {
        softmax(std::vector<float>{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::empty_input);
    }
}

TEST(Softmax, ShiftInvarianceProperty) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<float> v(n), w(n);
        const double c = rng.uniform(-50.0, 50.0);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = static_cast<float>(rng.normal(0.0, 3.0));
            w[i] = static_cast<float>(v[i] + c);
        }
        const auto a = softmax(v);
        const auto b = softmax(w);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-5);
            EXPECT_GT(a[i], 0.0f);
            sum += a[i];
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Rng, SameSeedSameSequence) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs = differs || x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, KnownFirstOutputs) {
    // Frozen from an independent implementation of the same generator.
    Rng r(0);
    EXPECT_EQ(r.next_u64(), 0x99ec5f36cb75f2b4ull);
    EXPECT_EQ(r.next_u64(), 0xbf6e1f784956452aull);
    EXPECT_EQ(r.next_u64(), 0x1a5f849d4933e6e0ull);
    EXPECT_EQ(Rng(0).fork(3).next_u64(), Rng(0).fork(3).next_u64());
    EXPECT_NE(Rng(0).fork(3).next_u64(), Rng(0).fork(4).next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
    Rng r(9);
    double su = 0.0, sn = 0.0, sn2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = r.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(MatrixOps, BlocksRoundTrip) {
    Rng rng(1);
    const auto m = random_normal<float>(6, 8, rng);
    MatrixF rebuilt(6, 8);
    for (std::size_t c = 0; c < 8; c += 2) rebuilt.set_block(0, c, m.col_block(c, c + 2));
    EXPECT_EQ(rebuilt, m);
    EXPECT_EQ(m.transposed().transposed(), m);
    EXPECT_THROW(m.block(0, 7, 0, 1), Error);
}

TEST(MatrixOps, OperationsStayFinite) {
    Rng rng(2);
    const auto a = random_normal<float>(10, 10, rng);
    EXPECT_TRUE(all_finite(matmul(a, a)));
    EXPECT_TRUE(all_finite(softmax_rows(a * 100.f)));
}

TEST(FlopCounter, CountsMatmulWork) {
    const MatrixF a(3, 5), b(5, 7);
    FlopCounter counter;
    matmul(a, b);
    EXPECT_EQ(counter.count(), 2u * 3 * 5 * 7);
}

}  // namespace
}  // namespace finermoe
