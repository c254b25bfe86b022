#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "widecorrect/errors.hpp"
#include "widecorrect/gradcheck.hpp"
#include "widecorrect/losses.hpp"

using namespace widecorrect;

namespace {

constexpr int H = 6, W = 5;

// Logits with margin on the target class of each pixel.
SegLogits peaked(const SegMask& target, double margin) {
    SegLogits s(target.height, target.width);
    const std::size_t hw = target.plane_size();
    for (int g = 0; g < 2; ++g) {
        for (std::size_t i = 0; i < hw; ++i) s.data[(g * 3 + target.data[g * hw + i]) * hw + i] = margin;
    }
    return s;
}

BinaryMask half_face() {
    BinaryMask m(H, W);
    for (int y = 0; y < H / 2; ++y) {
        for (int x = 0; x < W; ++x) m.at(0, y, x) = 1;
    }
    return m;
}

SegLogits random_logits(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 2.0);
    SegLogits s(H, W);
    for (double& v : s.data) v = n(rng);
    return s;
}

}  // namespace

TEST(LossM1, ZeroOnEqualFlows) {
    const FlowMap f = wctest::random_flow(H, W, -3, 3, 1);
    EXPECT_EQ(loss_m1(f, f, WeightMask(H, W)), 0.0);
}

TEST(LossM1, ConstantResidualOfTwo) {
    const FlowMap a = wctest::random_flow(H, W, -3, 3, 1);
    FlowMap b = a;
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] += (i % 2 ? 2.0 : -2.0);
    EXPECT_NEAR(loss_m1(a, b, WeightMask(H, W)), 2.0, 1e-15);
}

TEST(LossM1, LinearInMask) {
    const FlowMap a = wctest::random_flow(H, W, -3, 3, 1), b = wctest::random_flow(H, W, -3, 3, 2);
    const WeightMask m = make_weight_mask(half_face());
    WeightMask m2 = m;
    for (double& v : m2.data) v *= 2.0;
    EXPECT_NEAR(loss_m1(a, b, m2), 2.0 * loss_m1(a, b, m), 1e-14);
}

TEST(LossMs, ZeroOnEqualAndOnConstantOffset) {
    const FlowMap a = wctest::random_flow(H, W, -3, 3, 1);
    FlowMap b = a;
    for (double& v : b.data) v += 4.5;
    EXPECT_EQ(loss_ms(a, a, WeightMask(H, W)), 0.0);
    EXPECT_NEAR(loss_ms(a, b, WeightMask(H, W)), 0.0, 1e-13);
}

TEST(LossMs, RampAgainstFlatMatchesHandConvolution) {
    FlowMap ramp(H, W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) ramp.dx(y, x) = x;
    }
    // Interior columns respond with 8, the two replicate-padded edge columns with 4.
    const double expected = H * ((W - 2) * 8.0 + 2 * 4.0) / (2.0 * H * W);
    EXPECT_NEAR(loss_ms(ramp, FlowMap(H, W), WeightMask(H, W)), expected, 1e-14);
}

TEST(LossCe, PeakedLogitsNearZero) {
    SegMask t(H, W);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<std::uint8_t>(i % 3);
    EXPECT_LT(loss_ce(peaked(t, 20.0), t), 1e-8);
}

TEST(LossCe, UniformLogitsGiveLog3) {
    SegMask t(H, W);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<std::uint8_t>((i * 7) % 3);
    EXPECT_NEAR(loss_ce(SegLogits(H, W), t), std::log(3.0), 1e-14);
}

TEST(LossCe, PixelPermutationInvariant) {
    const SegLogits l = random_logits(3);
    SegMask t(H, W);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<std::uint8_t>((i * 5 + 1) % 3);
    std::vector<std::size_t> perm(static_cast<std::size_t>(H * W));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(4));
    SegLogits lp(H, W);
    SegMask tp(H, W);
    const std::size_t hw = H * W;
    for (std::size_t i = 0; i < hw; ++i) {
        for (int c = 0; c < 6; ++c) lp.data[c * hw + i] = l.data[c * hw + perm[i]];
        for (int g = 0; g < 2; ++g) tp.data[g * hw + i] = t.data[g * hw + perm[i]];
    }
    EXPECT_NEAR(loss_ce(lp, tp), loss_ce(l, t), 1e-14);
}

TEST(LossCe, RejectsBadTargets) {
    SegMask t(H, W);
    t.data[3] = 3;
    EXPECT_THROW(loss_ce(SegLogits(H, W), t), InvalidArgument);
}

TEST(LossSupervised, PerfectPredictionIsZero) {
    const FlowMap gt = wctest::random_flow(H, W, -9, 9, 1);
    const auto l = loss_supervised(gt, peaked(flow_to_seg(gt), 60.0), gt, half_face(), LossWeights{});
    EXPECT_EQ(l.m1, 0.0);
    EXPECT_EQ(l.ms, 0.0);
    EXPECT_LT(l.total, 1e-20);
}

TEST(LossSupervised, RecomposesFromComponents) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const FlowMap gt = wctest::random_flow(H, W, -9, 9, seed), pred = wctest::random_flow(H, W, -9, 9, seed + 100);
        const SegLogits l = random_logits(seed);
        const BinaryMask face = half_face();
        const LossWeights lw;
        const WeightMask m = make_weight_mask(face, 3.0, 1.0);
        const double m1 = loss_m1(pred, gt, m), ms = loss_ms(pred, gt, m), ce = loss_ce(l, flow_to_seg(gt, 5.0));
        const double expected = m1 + 10.0 * ms + 10.0 * ce;
        const auto s = loss_supervised(pred, l, gt, face, lw);
        EXPECT_LE(std::abs(s.total - expected), 1e-10 * std::abs(expected));
        EXPECT_EQ(s.m1, m1);
        EXPECT_EQ(s.ms, ms);
        EXPECT_EQ(s.ce, ce);
    }
}

TEST(LossSupervised, ZeroLambdasReduceToM1) {
    const FlowMap gt = wctest::random_flow(H, W, -9, 9, 1), pred = wctest::random_flow(H, W, -9, 9, 2);
    LossWeights lw;
    lw.lambda1 = lw.lambda2 = 0.0;
    EXPECT_EQ(loss_supervised(pred, random_logits(1), gt, half_face(), lw).total,
              loss_m1(pred, gt, make_weight_mask(half_face())));
}

TEST(LossUnsupervised, ZeroAtConsistentPeakedBranches) {
    const FlowMap f = wctest::random_flow(H, W, -9, 9, 1);
    const SegLogits l = peaked(flow_to_seg(f), 60.0);
    const auto u = loss_unsupervised(f, f, l, l, LossWeights{});
    EXPECT_EQ(u.rc, 0.0);
    EXPECT_LT(u.total, 1e-20);
}

TEST(LossUnsupervised, RcIsSymmetric) {
    const FlowMap a = wctest::random_flow(H, W, -9, 9, 1), b = wctest::random_flow(H, W, -9, 9, 2);
    const SegLogits l1 = random_logits(1), l2 = random_logits(2);
    EXPECT_EQ(loss_unsupervised(a, b, l1, l2, LossWeights{}).rc, loss_unsupervised(b, a, l2, l1, LossWeights{}).rc);
}

TEST(LossUnsupervised, RecomposesFromComponents) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const FlowMap a = wctest::random_flow(H, W, -9, 9, seed), b = wctest::random_flow(H, W, -9, 9, seed + 50);
        const SegLogits l1 = random_logits(seed), l2 = random_logits(seed + 50);
        const WeightMask ones(H, W, 1.0);
        const double rc = loss_m1(a, b, ones) + 10.0 * loss_ms(a, b, ones);
        const double d1 = loss_ce(l1, flow_to_seg(a, 5.0)), d2 = loss_ce(l2, flow_to_seg(b, 5.0));
        const auto u = loss_unsupervised(a, b, l1, l2, LossWeights{});
        const double expected = rc + d1 + d2;
        EXPECT_LE(std::abs(u.total - expected), 1e-10 * expected);
        EXPECT_LE(std::abs(u.rc - rc), 1e-10 * rc);
        EXPECT_EQ(u.drc1, d1);
        EXPECT_EQ(u.drc2, d2);
    }
}

TEST(LossUnsupervised, PseudoLabelsCarryNoFlowGradient) {
    const FlowMap a = wctest::random_flow(H, W, -9, 9, 1), b = wctest::random_flow(H, W, -9, 9, 2);
    FlowMap d1(H, W), d2(H, W);
    SegLogits s1(H, W), s2(H, W);
    loss_unsupervised(a, b, random_logits(1), random_logits(2), LossWeights{}, {&d1, &d2, &s1, &s2},
                      {.rc = false, .drc = true});
    for (double v : d1.data) EXPECT_EQ(v, 0.0);
    for (double v : d2.data) EXPECT_EQ(v, 0.0);
    EXPECT_GT(std::abs(s1.data[0]) + std::abs(s2.data[0]), 0.0);
}

TEST(LossUnsupervised, TermSwitches) {
    const FlowMap a = wctest::random_flow(H, W, -9, 9, 1), b = wctest::random_flow(H, W, -9, 9, 2);
    const SegLogits l1 = random_logits(1), l2 = random_logits(2);
    const auto full = loss_unsupervised(a, b, l1, l2, LossWeights{});
    const auto no_rc = loss_unsupervised(a, b, l1, l2, LossWeights{}, {}, {.rc = false, .drc = true});
    const auto no_drc = loss_unsupervised(a, b, l1, l2, LossWeights{}, {}, {.rc = true, .drc = false});
    EXPECT_EQ(no_rc.rc, 0.0);
    EXPECT_EQ(no_drc.drc1 + no_drc.drc2, 0.0);
    EXPECT_NEAR(no_rc.total + no_drc.total, full.total, 1e-12);
}

TEST(Losses, NonNegativeOnRandomInputs) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const FlowMap a = wctest::random_flow(H, W, -9, 9, seed), b = wctest::random_flow(H, W, -9, 9, seed + 1);
        const SegLogits l = random_logits(seed);
        EXPECT_GE(loss_m1(a, b, WeightMask(H, W)), 0.0);
        EXPECT_GE(loss_ms(a, b, WeightMask(H, W)), 0.0);
        EXPECT_GE(loss_ce(l, flow_to_seg(a)), 0.0);
        EXPECT_GE(loss_unsupervised(a, b, l, l, LossWeights{}).total, 0.0);
    }
}

// Finite differences at ten random points per loss.
TEST(Losses, GradientsMatchFiniteDifferences) {
    for (const char* m : {"loss_m1", "loss_ms", "loss_ce", "loss_supervised", "loss_unsupervised"}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto r = run_gradcheck(m, seed);
            EXPECT_TRUE(r.passed()) << m << " seed " << seed << " err " << r.max_rel_error << " at " << r.worst;
        }
    }
}

TEST(LossWeights, Validation) {
    LossWeights lw;
    lw.delta = 0.0;
    EXPECT_THROW(lw.validate(), InvalidArgument);
    lw = {};
    lw.w_face = 0.5;
    EXPECT_THROW(lw.validate(), InvalidArgument);
}
