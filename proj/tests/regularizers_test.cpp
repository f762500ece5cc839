// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/errors.hpp"
#include "cogs/regularizers.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cogs;
using test::central_difference;
using test::relative_error;

namespace {

std::vector<Vec3> random_positions(std::mt19937_64& rng, std::size_t n, double spread = 1.0) {
    std::vector<Vec3> p(n);
    for (auto& v : p) v = test::random_vec3(rng, -spread, spread);
    return p;
}

std::vector<Vec4> random_rotations(std::mt19937_64& rng, std::size_t n, bool unit = false) {
    std::vector<Vec4> q(n);
    for (auto& v : q) {
        v = test::random_unit_quaternion(rng);
        if (!unit) v *= test::uniform(rng, 0.7, 1.3);
    }
    return q;
}

NeighborTable two_point_table() {
    NeighborTable t;
    t.k = 1;
    t.lambda_w = 0.0;
    t.indices = {1, 0};
    t.weights = {1.0, 1.0};
    return t;
}

struct FdStats {
    double worst = 0.0;
    int checked = 0;
};

void probe(FdStats& stats, const std::function<double()>& loss, double& x, double analytic) {
    const double fd = central_difference(loss, x, 1e-5);
    if (std::abs(analytic) < 1e-9 && std::abs(fd) < 1e-9) return;
    stats.worst = std::max(stats.worst, relative_error(analytic, fd));
    ++stats.checked;
}

}  // namespace

// ---------------------------------------------------------------------------
// Neighbors

TEST(BuildNeighbors, CoincidentPairHasUnitWeight) {
    const std::vector<Vec3> p{Vec3(1, 2, 3), Vec3(1, 2, 3)};
    const auto t = build_neighbors(p, 1, 1234.0);
    EXPECT_EQ(t.weight(0, 0), 1.0);
    EXPECT_EQ(t.neighbor(0, 0), 1);
    EXPECT_EQ(t.neighbor(1, 0), 0);
}

TEST(BuildNeighbors, UnitDistanceWeight) {
    const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    EXPECT_NEAR(build_neighbors(p, 1, 1.0).weight(0, 0), 0.367879, 1e-6);
}

TEST(BuildNeighbors, CollinearInteriorPointsUseAdjacentNeighbors) {
    std::vector<Vec3> p;
    for (int i = 0; i < 5; ++i) p.emplace_back(i, 0, 0);
    const auto t = build_neighbors(p, 2, 1.0);
    for (int i = 1; i < 4; ++i) {
        std::vector<int> got{t.neighbor(i, 0), t.neighbor(i, 1)};
        std::sort(got.begin(), got.end());
        EXPECT_EQ(got, (std::vector<int>{i - 1, i + 1}));
    }
}

TEST(BuildNeighbors, MatchesBruteForceOracle) {
    std::mt19937_64 rng(1);
    const auto p = random_positions(rng, 60);
    const int k = 5;
    const auto t = build_neighbors(p, k, 3.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        // Oracle: distances to all others, least k by (distance, index).
        std::vector<std::pair<double, int>> all;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (j != i) all.emplace_back((p[i] - p[j]).norm(), static_cast<int>(j));
        }
        std::sort(all.begin(), all.end());
        for (int s = 0; s < k; ++s) {
            EXPECT_EQ(t.neighbor(i, s), all[s].second);
            EXPECT_NEAR(t.weight(i, s), std::exp(-3.0 * all[s].first * all[s].first), 1e-12);
            EXPECT_NE(t.neighbor(i, s), static_cast<int>(i));
            EXPECT_GT(t.weight(i, s), 0.0);
            EXPECT_LE(t.weight(i, s), 1.0);
        }
    }
}

TEST(BuildNeighbors, TiesBrokenByLowerIndex) {
    const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 1, 0)};
    const auto t = build_neighbors(p, 2, 1.0);
    EXPECT_EQ(t.neighbor(0, 0), 1);
    EXPECT_EQ(t.neighbor(0, 1), 2);
}

TEST(BuildNeighbors, TooFewPointsIsConfigError) {
    const std::vector<Vec3> p(3, Vec3::Zero());
    EXPECT_THROW(build_neighbors(p, 3, 1.0), ConfigError);
    EXPECT_THROW(build_neighbors(p, 0, 1.0), ConfigError);
}

// ---------------------------------------------------------------------------
// loss_norm

TEST(LossNorm, Examples) {
    EXPECT_EQ(loss_norm(std::vector<Vec3>(4, Vec3::Zero())).value, 0.0);
    EXPECT_DOUBLE_EQ(loss_norm(std::vector<Vec3>{Vec3(3, 4, 0)}).value, 5.0);
    const auto l = loss_norm(std::vector<Vec3>{Vec3(1, 0, 0), Vec3::Zero()});
    EXPECT_DOUBLE_EQ(l.value, 0.5);
    EXPECT_EQ(l.grad[0], Vec3(0.5, 0, 0));
    EXPECT_EQ(l.grad[1], Vec3::Zero());
}

TEST(LossNorm, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(2);
    auto offsets = random_positions(rng, 20);
    const auto l = loss_norm(offsets);
    FdStats stats;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            probe(stats, [&] { return loss_norm(offsets).value; }, offsets[i][k], l.grad[i][k]);
        }
    }
    EXPECT_LT(stats.worst, 1e-5);
}

// ---------------------------------------------------------------------------
// loss_diff

TEST(LossDiff, NullCases) {
    std::mt19937_64 rng(3);
    const auto p = random_positions(rng, 20);
    const auto t = build_neighbors(p, 4, 2000.0);
    EXPECT_EQ(loss_diff(p, p, t).value, 0.0);
    auto moved = p;
    for (auto& v : moved) v += Vec3(0.5, -0.25, 1.0);
    EXPECT_NEAR(loss_diff(moved, p, t).value, 0.0, 1e-9);
}

TEST(LossDiff, TwoPoints) {
    const std::vector<Vec3> now{Vec3(0, 0, 0), Vec3(1.5, 0, 0)};
    const std::vector<Vec3> prev{Vec3(0, 0, 0), Vec3(2.0, 0, 0)};
    EXPECT_NEAR(loss_diff(now, prev, two_point_table()).value, 0.5, 1e-12);
}

TEST(LossDiff, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    auto prev = random_positions(rng, 20);
    auto now = prev;
    for (auto& v : now) v += test::random_vec3(rng, -0.2, 0.2);
    const auto t = build_neighbors(prev, 5, 2.0);
    const auto l = loss_diff(now, prev, t);
    auto loss = [&] { return loss_diff(now, prev, t).value; };
    FdStats stats;
    for (std::size_t i = 0; i < now.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            probe(stats, loss, now[i][k], l.grad_positions_t[i][k]);
            probe(stats, loss, prev[i][k], l.grad_positions_prev[i][k]);
        }
    }
    EXPECT_GT(stats.checked, 100);
    EXPECT_LT(stats.worst, 1e-5);
}

TEST(LossDiff, TranslationOfBothSlicesIsInvariant) {
    std::mt19937_64 rng(5);
    auto prev = random_positions(rng, 20);
    auto now = random_positions(rng, 20);
    const auto t = build_neighbors(prev, 4, 2.0);
    const double before = loss_diff(now, prev, t).value;
    for (auto& v : prev) v += Vec3(3, -2, 1);
    for (auto& v : now) v += Vec3(3, -2, 1);
    EXPECT_NEAR(loss_diff(now, prev, t).value, before, 1e-12);
}

// ---------------------------------------------------------------------------
// loss_rigid

TEST(LossRigid, NoMotionIsZero) {
    std::mt19937_64 rng(6);
    const auto p = random_positions(rng, 20);
    const std::vector<Vec4> id(20, Vec4(1, 0, 0, 0));
    const auto t = build_neighbors(p, 4, 2.0);
    EXPECT_EQ(loss_rigid(p, p, id, id, t).value, 0.0);
}

TEST(LossRigid, GlobalRigidMotionIsZero) {
    std::mt19937_64 rng(7);
    const auto prev = random_positions(rng, 20);
    const auto rot_prev = random_rotations(rng, 20, true);
    const Vec4 q = test::random_unit_quaternion(rng);
    const Mat3 rq = rotation_matrix(q);
    const Vec3 shift(0.3, -0.7, 0.2);
    std::vector<Vec3> now(20);
    std::vector<Vec4> rot_now(20);
    for (int i = 0; i < 20; ++i) {
        now[i] = rq * prev[i] + shift;
        rot_now[i] = quat_multiply(q, rot_prev[i]);
    }
    const auto t = build_neighbors(prev, 6, 2.0);
    EXPECT_NEAR(loss_rigid(now, prev, rot_now, rot_prev, t).value, 0.0, 1e-9);
}

TEST(LossRigid, QuarterTurnOfRelativeOffset) {
    const std::vector<Vec3> prev{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    const std::vector<Vec3> now{Vec3(0, 0, 0), Vec3(0, 1, 0)};
    const std::vector<Vec4> id(2, Vec4(1, 0, 0, 0));
    NeighborTable t = two_point_table();
    t.indices = {1, 0};
    // Hand expansion: i = 0 contributes |(1,0,0) - (0,1,0)|, i = 1 the same; normalized by kN = 2.
    EXPECT_NEAR(loss_rigid(now, prev, id, id, t).value, std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(loss_rigid(now, prev, id, id, t).value, 1.41421, 1e-5);
}

TEST(LossRigid, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    auto prev = random_positions(rng, 20);
    auto now = prev;
    for (auto& v : now) v += test::random_vec3(rng, -0.3, 0.3);
    auto rot_prev = random_rotations(rng, 20);
    auto rot_now = random_rotations(rng, 20);
    const auto t = build_neighbors(prev, 5, 1.5);
    const auto l = loss_rigid(now, prev, rot_now, rot_prev, t);
    auto loss = [&] { return loss_rigid(now, prev, rot_now, rot_prev, t).value; };
    FdStats stats;
    for (std::size_t i = 0; i < now.size(); ++i) {
        for (int k = 0; k < 3; ++k) {
            probe(stats, loss, now[i][k], l.grad_positions_t[i][k]);
            probe(stats, loss, prev[i][k], l.grad_positions_prev[i][k]);
        }
        for (int k = 0; k < 4; ++k) {
            probe(stats, loss, rot_now[i][k], l.grad_rotations_t[i][k]);
            probe(stats, loss, rot_prev[i][k], l.grad_rotations_prev[i][k]);
        }
    }
    EXPECT_GT(stats.checked, 200);
    EXPECT_LT(stats.worst, 1e-5);
}

TEST(LossRigid, TranslationOfBothSlicesIsInvariant) {
    std::mt19937_64 rng(9);
    auto prev = random_positions(rng, 20);
    auto now = random_positions(rng, 20);
    const auto rp = random_rotations(rng, 20), rn = random_rotations(rng, 20);
    const auto t = build_neighbors(prev, 4, 2.0);
    const double before = loss_rigid(now, prev, rn, rp, t).value;
    for (auto& v : prev) v += Vec3(-1, 2, 0.5);
    for (auto& v : now) v += Vec3(-1, 2, 0.5);
    EXPECT_NEAR(loss_rigid(now, prev, rn, rp, t).value, before, 1e-12);
}

TEST(LossRigid, ZeroResidualHasZeroGradient) {
    const std::vector<Vec3> p{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    const std::vector<Vec4> id(2, Vec4(1, 0, 0, 0));
    const auto l = loss_rigid(p, p, id, id, two_point_table());
    for (int i = 0; i < 2; ++i) {
        EXPECT_TRUE(l.grad_positions_t[i].isZero(0.0));
        EXPECT_TRUE(l.grad_rotations_t[i].isZero(0.0));
    }
}

// ---------------------------------------------------------------------------
// loss_rot

TEST(LossRot, StaticAndCommonDeltaAreZero) {
    std::mt19937_64 rng(10);
    const auto p = random_positions(rng, 20);
    const auto t = build_neighbors(p, 4, 2.0);
    const auto rp = random_rotations(rng, 20, true);
    EXPECT_NEAR(loss_rot(rp, rp, t).value, 0.0, 1e-9);
    const Vec4 d = test::random_unit_quaternion(rng);
    std::vector<Vec4> rn(20);
    for (int i = 0; i < 20; ++i) rn[i] = quat_multiply(d, rp[i]);
    EXPECT_NEAR(loss_rot(rn, rp, t).value, 0.0, 1e-9);
}

TEST(LossRot, HalfTurnAgainstStatic) {
    const std::vector<Vec4> prev(2, Vec4(1, 0, 0, 0));
    const std::vector<Vec4> now{Vec4(1, 0, 0, 0), quaternion_from_axis_angle(Vec3::UnitZ(), std::numbers::pi)};
    // Deltas (1,0,0,0) and (0,0,0,1): each direction contributes sqrt(2), divided by kN = 2.
    EXPECT_NEAR(loss_rot(now, prev, two_point_table()).value, std::sqrt(2.0), 1e-12);
}

TEST(LossRot, GlobalSignFlipInvariant) {
    std::mt19937_64 rng(11);
    const auto p = random_positions(rng, 20);
    const auto t = build_neighbors(p, 4, 2.0);
    auto rp = random_rotations(rng, 20), rn = random_rotations(rng, 20);
    const double before = loss_rot(rn, rp, t).value;
    for (auto& q : rp) q = -q;
    for (auto& q : rn) q = -q;
    EXPECT_NEAR(loss_rot(rn, rp, t).value, before, 1e-12);
}

TEST(LossRot, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(12);
    const auto p = random_positions(rng, 20);
    const auto t = build_neighbors(p, 5, 1.5);
    auto rp = random_rotations(rng, 20), rn = random_rotations(rng, 20);
    const auto l = loss_rot(rn, rp, t);
    auto loss = [&] { return loss_rot(rn, rp, t).value; };
    FdStats stats;
    for (std::size_t i = 0; i < rn.size(); ++i) {
        for (int k = 0; k < 4; ++k) {
            probe(stats, loss, rn[i][k], l.grad_rotations_t[i][k]);
            probe(stats, loss, rp[i][k], l.grad_rotations_prev[i][k]);
        }
    }
    EXPECT_GT(stats.checked, 100);
    EXPECT_LT(stats.worst, 1e-5);
}

TEST(QuatMultiplyBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(13);
    Vec4 a = test::random_unit_quaternion(rng), b = test::random_unit_quaternion(rng);
    const Vec4 g(0.3, -0.2, 0.9, 0.4);
    const auto grad = quat_multiply_backward(a, b, g);
    auto loss = [&] { return g.dot(quat_multiply(a, b)); };
    for (int k = 0; k < 4; ++k) {
        EXPECT_NEAR(grad.a[k], central_difference(loss, a[k], 1e-6), 1e-9);
        EXPECT_NEAR(grad.b[k], central_difference(loss, b[k], 1e-6), 1e-9);
    }
}

// ---------------------------------------------------------------------------
// loss_mask

TEST(LossMask, IdealSeparationIsZero) {
    Image gt1(4, 4, 1), gt2(4, 4, 1);
    for (int x = 0; x < 4; ++x) {
        for (int y = 0; y < 4; ++y) (x < 2 ? gt1 : gt2).at(x, y) = 1.0;
    }
    // M1 is zero where gt2 is on and vice versa; elsewhere the outer factor vanishes.
    Image m1 = gt1, m2 = gt2;
    const std::vector<Image> rendered{m1, m2}, gt{gt1, gt2};
    EXPECT_EQ(loss_mask(rendered, gt).value, 0.0);
}

TEST(LossMask, ZeroGroundTruthGivesZero) {
    std::mt19937_64 rng(14);
    std::vector<Image> rendered(3, Image(5, 5, 1)), gt(3, Image(5, 5, 1));
    for (auto& r : rendered) {
        for (double& v : r.data) v = test::uniform(rng, 0, 1);
    }
    const auto l = loss_mask(rendered, gt);
    EXPECT_EQ(l.value, 0.0);
    for (const auto& g : l.grad) {
        for (double v : g.data) EXPECT_EQ(v, 0.0);
    }
}

TEST(LossMask, SinglePixel) {
    std::vector<Image> rendered(2, Image(1, 1, 1)), gt(2, Image(1, 1, 1));
    rendered[0].data[0] = 1.0;
    gt[1].data[0] = 1.0;
    EXPECT_DOUBLE_EQ(loss_mask(rendered, gt).value, 1.0);
}

TEST(LossMask, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(15);
    std::vector<Image> rendered(3, Image(6, 5, 1)), gt(3, Image(6, 5, 1));
    for (auto& r : rendered) {
        for (double& v : r.data) v = test::uniform(rng, 0, 1);
    }
    for (auto& g : gt) {
        for (double& v : g.data) v = test::uniform(rng, 0, 1) < 0.4 ? 1.0 : 0.0;
    }
    const auto l = loss_mask(rendered, gt);
    FdStats stats;
    auto loss = [&] { return loss_mask(rendered, gt).value; };
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        for (std::size_t p = 0; p < rendered[i].data.size(); ++p) {
            probe(stats, loss, rendered[i].data[p], l.grad[i].data[p]);
        }
    }
    EXPECT_GT(stats.checked, 20);
    EXPECT_LT(stats.worst, 1e-5);
}

TEST(LossMask, ShapeMismatchIsConfigError) {
    std::vector<Image> rendered{Image(4, 4, 1)}, gt{Image(4, 5, 1)};
    EXPECT_THROW(loss_mask(rendered, gt), ConfigError);
    std::vector<Image> two(2, Image(4, 4, 1));
    EXPECT_THROW(loss_mask(rendered, two), ConfigError);
}

TEST(Regularizers, AllLossesNonNegative) {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prev = random_positions(rng, 20), now = random_positions(rng, 20);
        const auto rp = random_rotations(rng, 20), rn = random_rotations(rng, 20);
        const auto t = build_neighbors(prev, 4, 2.0);
        EXPECT_GE(loss_norm(now).value, 0.0);
        EXPECT_GE(loss_diff(now, prev, t).value, 0.0);
        EXPECT_GE(loss_rigid(now, prev, rn, rp, t).value, 0.0);
        EXPECT_GE(loss_rot(rn, rp, t).value, 0.0);
    }
}
