#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "widecorrect/metrics.hpp"

using namespace widecorrect;

namespace {

std::vector<Point> random_points(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-10.0, 10.0);
    std::vector<Point> p(n);
    for (auto& q : p) q = {u(rng), u(rng)};
    return p;
}

// Independent oracle: Procrustes-free normalized correlation of centered sets.
double shape_oracle(const std::vector<Point>& a, const std::vector<Point>& b) {
    const double n = static_cast<double>(a.size());
    double ax = 0, ay = 0, bx = 0, by = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ax += a[i].x; ay += a[i].y; bx += b[i].x; by += b[i].y;
    }
    ax /= n; ay /= n; bx /= n; by /= n;
    double na = 0, nb = 0, dot = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x1 = a[i].x - ax, y1 = a[i].y - ay, x2 = b[i].x - bx, y2 = b[i].y - by;
        na += x1 * x1 + y1 * y1;
        nb += x2 * x2 + y2 * y2;
        dot += x1 * x2 + y1 * y2;
    }
    return 100.0 * dot / std::sqrt(na * nb);
}

}  // namespace

TEST(LineAcc, TwoSegmentExample) {
    // slopes 0 and 0.2 against a horizontal reference
    const std::vector<Point> d = {{0, 0}, {1, 0}, {2, 0.2}};
    EXPECT_NEAR(line_acc(d, {Point{0, 0}, Point{2, 0}}), 90.0, 1e-12);
    const std::vector<Point> r = {{2, 0.2}, {1, 0}, {0, 0}};
    EXPECT_NEAR(line_acc(r, {Point{0, 0}, Point{2, 0}}), 90.0, 1e-12);
}

TEST(LineAcc, StraightCollinearScoresFull) {
    std::vector<Point> d;
    for (int i = 0; i < 10; ++i) d.push_back({1.0 + i, 2.0 + 0.3 * i});
    EXPECT_NEAR(line_acc(d, {Point{-5, 0.2}, Point{5, 3.2}}), 100.0, 1e-9);
}

TEST(LineAcc, SteepLinesRotated) {
    std::vector<Point> d, t;
    for (int i = 0; i < 8; ++i) {
        d.push_back({0.1 * (i % 2), static_cast<double>(i)});
        t.push_back({static_cast<double>(i), -0.1 * (i % 2)});
    }
    EXPECT_NEAR(line_acc(d, {Point{0, 0}, Point{0, 7}}), line_acc(t, {Point{0, 0}, Point{7, 0}}), 1e-9);
    EXPECT_TRUE(std::isfinite(line_acc(d, {Point{0, 0}, Point{0, 7}})));
}

TEST(ShapeAcc, IdenticalAndRotated) {
    const auto p = random_points(16, 1);
    EXPECT_NEAR(shape_acc(p, p), 100.0, 1e-9);
    std::vector<Point> rot;
    for (const auto& q : p) rot.push_back({-q.y, q.x});
    // rotation by 90 degrees about the origin keeps the centroid relation, dot products vanish
    EXPECT_NEAR(shape_acc(rot, p), 0.0, 1e-9);
}

TEST(ShapeAcc, MatchesOracleAndInvariances) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto a = random_points(16, 2 * s), b = random_points(16, 2 * s + 1);
        EXPECT_NEAR(shape_acc(a, b), shape_oracle(a, b), 1e-9);
        std::vector<Point> moved;
        for (const auto& q : a) moved.push_back({3.5 * q.x + 11.0, 3.5 * q.y - 4.0});
        EXPECT_NEAR(shape_acc(moved, b), shape_acc(a, b), 1e-9);
        EXPECT_NEAR(shape_acc(a, b), shape_acc(b, a), 1e-9);
        EXPECT_LE(std::abs(shape_acc(a, b)), 100.0 + 1e-9);
    }
}

TEST(EndPointError, EuclideanMean) {
    FlowMap a(2, 2), b(2, 2);
    a.at(0, 0, 0) = 3.0;
    a.at(1, 0, 0) = 4.0;
    EXPECT_DOUBLE_EQ(end_point_error(a, b), 5.0 / 4.0);
    EXPECT_DOUBLE_EQ(end_point_error(a, a), 0.0);
}

TEST(Evaluate, GroundTruthFlowScoresFull) {
    const auto d = generate_dataset({.count = 6, .labeled_frac = 1.0, .seed = 12});
    std::vector<FlowMap> gt, zero;
    for (const auto& s : d) {
        gt.push_back(*s.flow_gt);
        zero.emplace_back(s.flow_gt->height, s.flow_gt->width);
    }
    const MetricReport r = evaluate_flows(d, gt);
    EXPECT_NEAR(r.lineacc, 100.0, 1e-4);
    EXPECT_NEAR(r.shapeacc, 100.0, 1e-4);
    EXPECT_EQ(r.epe, 0.0);
    EXPECT_EQ(r.epe_count, 6);
    EXPECT_GT(r.line_count, 0);
    EXPECT_GT(r.face_count, 0);
    const MetricReport z = evaluate_flows(d, zero);
    EXPECT_LT(z.lineacc, r.lineacc);
    EXPECT_LT(z.shapeacc, r.shapeacc);
    EXPECT_GT(z.epe, 0.0);
}

TEST(Evaluate, OrderIndependentAndUnlabeledSkipsEpe) {
    auto d = generate_dataset({.count = 5, .labeled_frac = 0.6, .seed = 3});
    std::vector<FlowMap> zero;
    for (const auto& s : d) zero.emplace_back(s.distorted.height, s.distorted.width);
    const MetricReport r = evaluate_flows(d, zero);
    EXPECT_EQ(r.epe_count, 3);
    std::vector<Sample> rev(d.rbegin(), d.rend());
    const MetricReport q = evaluate_flows(rev, zero);
    EXPECT_EQ(r, q);
    ASSERT_EQ(r.samples.size(), 5u);
    EXPECT_TRUE(std::is_sorted(r.samples.begin(), r.samples.end(),
                               [](const auto& a, const auto& b) { return a.id < b.id; }));
    EXPECT_FALSE(r.samples[4].epe.has_value());
    const auto j = r.to_json();
    EXPECT_EQ(j.at("samples").size(), 5u);
    EXPECT_NE(r.to_csv().find("s00004"), std::string::npos);
}

TEST(Evaluate, SingleSample) {
    const auto d = generate_dataset({.count = 1, .labeled_frac = 1.0, .seed = 99});
    std::vector<FlowMap> gt = {*d[0].flow_gt};
    const MetricReport r = evaluate_flows(d, gt);
    EXPECT_EQ(r.samples.size(), 1u);
    EXPECT_TRUE(std::isfinite(r.lineacc));
}

TEST(Evaluate, MismatchedSizesRejected) {
    const auto d = generate_dataset({.count = 2, .labeled_frac = 1.0, .seed = 5});
    std::vector<FlowMap> one = {*d[0].flow_gt};
    EXPECT_ANY_THROW(evaluate_flows(d, one));
}
