#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "mlcvnet/geom.hpp"
#include "oracles.hpp"

using namespace mlcvnet;

namespace {

Points make_points(std::initializer_list<std::array<double, 3>> pts) {
    Points p(static_cast<Eigen::Index>(pts.size()), 3);
    Eigen::Index i = 0;
    for (const auto& q : pts) p.row(i++) << q[0], q[1], q[2];
    return p;
}

Points random_points(std::size_t n, std::mt19937_64& rng, double extent = 1.0) {
    std::uniform_real_distribution<double> d(-extent, extent);
    Points p(static_cast<Eigen::Index>(n), 3);
    for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) << d(rng), d(rng), d(rng);
    return p;
}

}  // namespace

TEST(FarthestPointSample, CollinearExample) {
    auto p = make_points({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {10, 0, 0}});
    EXPECT_EQ(farthest_point_sample(p, 2, 0), (std::vector<std::size_t>{0, 3}));
    EXPECT_EQ(oracle::brute_force_fps(p, 2, 0), (std::vector<std::size_t>{0, 3}));
}

TEST(FarthestPointSample, FullAndSingleSelections) {
    std::mt19937_64 rng(1);
    auto p = random_points(20, rng);
    auto all = farthest_point_sample(p, 20, 5);
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(all[i], i);
    EXPECT_EQ(farthest_point_sample(p, 1, 7), (std::vector<std::size_t>{7}));
}

TEST(FarthestPointSample, RejectsBadArguments) {
    auto p = make_points({{0, 0, 0}, {1, 0, 0}});
    EXPECT_THROW(farthest_point_sample(p, 3, 0), std::invalid_argument);
    EXPECT_THROW(farthest_point_sample(p, 1, 2), std::invalid_argument);
    EXPECT_THROW(farthest_point_sample(p, 0, 0), std::invalid_argument);
}

TEST(FarthestPointSample, TiesGoToSmallestIndex) {
    auto p = make_points({{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}});
    EXPECT_EQ(farthest_point_sample(p, 2, 0), (std::vector<std::size_t>{0, 1}));
}

TEST(FarthestPointSample, GreedyInvariantMatchesBruteForce) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng() % 63;
        auto p = random_points(n, rng);
        const std::size_t k = 1 + rng() % n;
        const std::size_t s = rng() % n;
        EXPECT_EQ(farthest_point_sample(p, k, s), oracle::brute_force_fps(p, k, s));
    }
}

TEST(BallQuery, TwoHitsPadWithFirst) {
    auto p = make_points({{5, 5, 5}, {0.1, 0, 0}, {9, 9, 9}, {0, 0.2, 0}});
    auto c = make_points({{0, 0, 0}});
    auto idx = ball_query(p, c, 0.5, 4);
    EXPECT_EQ(std::vector<std::size_t>(idx.row(0).begin(), idx.row(0).end()), (std::vector<std::size_t>{1, 3, 1, 1}));
}

TEST(BallQuery, EmptyBallUsesNearestNeighbor) {
    auto p = make_points({{5, 5, 5}, {2, 0, 0}, {9, 9, 9}});
    auto c = make_points({{0, 0, 0}});
    auto idx = ball_query(p, c, 0.5, 3);
    EXPECT_EQ(std::vector<std::size_t>(idx.row(0).begin(), idx.row(0).end()), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(BallQuery, WholeCloudRadiusTakesLowestIndices) {
    std::mt19937_64 rng(3);
    auto p = random_points(30, rng);
    auto c = random_points(4, rng);
    auto idx = ball_query(p, c, 100.0, 5);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(idx(r, j), j);
}

TEST(BallQuery, MatchesRangeScan) {
    std::mt19937_64 rng(4);
    auto p = random_points(200, rng);
    auto c = random_points(10, rng);
    auto idx = ball_query(p, c, 0.4, 8);
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
        std::vector<std::size_t> hits;
        for (Eigen::Index i = 0; i < p.rows(); ++i)
            if ((p.row(i) - c.row(r)).norm() <= 0.4) hits.push_back(static_cast<std::size_t>(i));
        if (hits.empty()) {
            Eigen::Index nn = 0;
            (p.rowwise() - c.row(r)).rowwise().norm().minCoeff(&nn);
            hits.push_back(static_cast<std::size_t>(nn));
        }
        for (std::size_t j = 0; j < 8; ++j)
            EXPECT_EQ(idx(static_cast<std::size_t>(r), j), j < hits.size() ? hits[j] : hits[0]);
    }
}

TEST(BallQuery, EmptyCloudRejected) {
    Points empty(0, 3);
    auto c = make_points({{0, 0, 0}});
    EXPECT_THROW(ball_query(empty, c, 1.0, 2), std::invalid_argument);
}

TEST(ThreeNN, CoincidentSourceDominates) {
    auto src = make_points({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}});
    RowMatrix f(3, 2);
    f << 1, 2, 3, 4, 5, 6;
    auto dst = make_points({{1, 0, 0}});
    auto out = three_nn_interpolate(src, f, dst);
    EXPECT_NEAR(out(0, 0), 3.0, 1e-6);
    EXPECT_NEAR(out(0, 1), 4.0, 1e-6);
}

TEST(ThreeNN, MidpointOfTwoEquidistantSources) {
    auto src = make_points({{-1, 0, 0}, {1, 0, 0}, {10, 0, 0}});
    RowMatrix f(3, 1);
    f << 2.0, 4.0, 100.0;
    auto dst = make_points({{0, 0, 0}});
    // Hand weights: 1/(1+eps), 1/(1+eps), 1/(10+eps), normalized.
    const double w1 = 1.0 / (1.0 + 1e-8), w3 = 1.0 / (10.0 + 1e-8);
    const double expected = (w1 * 2.0 + w1 * 4.0 + w3 * 100.0) / (2 * w1 + w3);
    auto out = three_nn_interpolate(src, f, dst);
    EXPECT_NEAR(out(0, 0), expected, 1e-12);
    EXPECT_NEAR(expected, 16.0 / 2.1, 1e-6);
}

TEST(ThreeNN, SingleSourceReplicates) {
    auto src = make_points({{0.3, 0.1, 0}});
    RowMatrix f(1, 2);
    f << 7, -1;
    std::mt19937_64 rng(5);
    auto dst = random_points(5, rng);
    auto out = three_nn_interpolate(src, f, dst);
    for (Eigen::Index r = 0; r < 5; ++r) {
        EXPECT_DOUBLE_EQ(out(r, 0), 7.0);
        EXPECT_DOUBLE_EQ(out(r, 1), -1.0);
    }
}

TEST(BoxIoU, IdenticalBoxesGiveOne) {
    auto b = OrientedBox3D::make({1, 2, 0.5}, {1.2, 0.7, 0.9}, 0.4);
    EXPECT_NEAR(box_iou_3d(b, b), 1.0, 1e-9);
}

TEST(BoxIoU, ShiftedUnitCubesGiveOneThird) {
    auto a = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    auto b = OrientedBox3D::make({0.5, 0, 0}, {1, 1, 1}, 0);
    EXPECT_NEAR(box_iou_3d(a, b), 1.0 / 3.0, 1e-12);
}

TEST(BoxIoU, QuarterTurnedUnitCube) {
    auto a = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    auto b = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, std::numbers::pi / 4);
    // Octagon area 2(sqrt2 - 1); IoU works out to 1/sqrt2.
    EXPECT_NEAR(box_iou_3d(a, b), 1.0 / std::sqrt(2.0), 1e-9);
    std::mt19937_64 rng(6);
    EXPECT_NEAR(box_iou_3d(a, b), oracle::monte_carlo_iou(a, b, 1'000'000, rng), 2e-3);
}

TEST(BoxIoU, DisjointAndDegenerate) {
    auto a = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    auto b = OrientedBox3D::make({5, 0, 0}, {1, 1, 1}, 0.3);
    EXPECT_EQ(box_iou_3d(a, b), 0.0);
    OrientedBox3D bad{{0, 0, 0}, {1, 0, 1}, 0};
    EXPECT_THROW(box_iou_3d(a, bad), std::invalid_argument);
}

TEST(BoxIoU, SymmetryAndInvariances) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> shift(-5, 5), turn(-3, 3);
    for (int t = 0; t < 300; ++t) {
        auto [a, b] = oracle::random_box_pair(rng);
        const double iou = box_iou_3d(a, b);
        EXPECT_EQ(iou, box_iou_3d(b, a));
        EXPECT_NEAR(box_iou_3d(a, a), 1.0, 1e-9);
        const Vec3 d(shift(rng), shift(rng), shift(rng));
        auto ta = a, tb = b;
        ta.center += d;
        tb.center += d;
        EXPECT_NEAR(box_iou_3d(ta, tb), iou, 1e-9);
        const double r = turn(rng);
        const Eigen::Matrix3d rot = Eigen::AngleAxisd(r, Vec3::UnitZ()).toRotationMatrix();
        auto ra = OrientedBox3D::make(rot * a.center, a.size, a.yaw + r);
        auto rb = OrientedBox3D::make(rot * b.center, b.size, b.yaw + r);
        EXPECT_NEAR(box_iou_3d(ra, rb), iou, 1e-9);
    }
}

TEST(BoxIoU, AgreesWithMonteCarloOnRandomPairs) {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 25; ++t) {
        auto [a, b] = oracle::random_box_pair(rng);
        EXPECT_NEAR(box_iou_3d(a, b), oracle::monte_carlo_iou(a, b, 1'000'000, rng), 2e-3);
    }
}

TEST(Nms, SingleDetectionKept) {
    std::vector<Detection> d{{OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0), 0, 0.3}};
    EXPECT_EQ(nms_3d(d, 0.25), (std::vector<std::size_t>{0}));
}

TEST(Nms, FullOverlapKeepsHigherScore) {
    auto b = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    std::vector<Detection> d{{b, 1, 0.8}, {b, 1, 0.9}};
    EXPECT_EQ(nms_3d(d, 0.25), (std::vector<std::size_t>{1}));
}

TEST(Nms, DisjointBoxesBothKept) {
    std::vector<Detection> d{{OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0), 0, 0.1},
                             {OrientedBox3D::make({3, 0, 0}, {1, 1, 1}, 0), 0, 0.9}};
    EXPECT_EQ(nms_3d(d, 0.25), (std::vector<std::size_t>{1, 0}));
}

TEST(Nms, CrossClassOverlapNotSuppressed) {
    auto b = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    std::vector<Detection> d{{b, 0, 0.9}, {b, 1, 0.8}};
    EXPECT_EQ(nms_3d(d, 0.25).size(), 2u);
}

TEST(Nms, ScoreTiesPreferSmallerIndex) {
    auto b = OrientedBox3D::make({0, 0, 0}, {1, 1, 1}, 0);
    std::vector<Detection> d{{b, 0, 0.5}, {b, 0, 0.5}};
    EXPECT_EQ(nms_3d(d, 0.25), (std::vector<std::size_t>{0}));
}

TEST(PointsInBox, CenterAndFaceBoundary) {
    auto b = OrientedBox3D::make({1, 1, 1}, {2, 4, 6}, 0);
    auto p = make_points({{1, 1, 1}, {2, 1, 1}, {1, 1, 4}, {2.01, 1, 1}});
    auto m = points_in_box(p, b);
    EXPECT_TRUE(m[0]);
    EXPECT_TRUE(m[1]);
    EXPECT_TRUE(m[2]);
    EXPECT_FALSE(m[3]);
}

TEST(PointsInBox, RotatedBoxCatchesPointOutsideAxisAlignedExtent) {
    // 4 x 0.2 x 1 slab turned 45 degrees. (1.2, 1.2, 0) has box-frame coordinates
    // (1.2*sqrt2, 0, 0) = (1.697, 0, 0): inside, though x=1.2 lies beyond the
    // unrotated half-width... of the short side, and within the long side.
    auto b = OrientedBox3D::make({0, 0, 0}, {4, 0.2, 1}, std::numbers::pi / 4);
    auto p = make_points({{1.2, 1.2, 0}, {1.2, -1.2, 0}});
    auto m = points_in_box(p, b);
    EXPECT_TRUE(m[0]);
    EXPECT_FALSE(m[1]);
}

TEST(PointsInBox, RigidTransformInvariance) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> ang(-3, 3), sh(-4, 4);
    for (int t = 0; t < 20; ++t) {
        auto [box, unused] = oracle::random_box_pair(rng);
        (void)unused;
        auto pts = random_points(500, rng, 3.0);
        pts.rowwise() += box.center.transpose();
        auto before = points_in_box(pts, box);
        const double r = ang(rng);
        const Vec3 d(sh(rng), sh(rng), sh(rng));
        const Eigen::Matrix3d rot = Eigen::AngleAxisd(r, Vec3::UnitZ()).toRotationMatrix();
        Points moved = (pts * rot.transpose()).rowwise() + d.transpose();
        auto moved_box = OrientedBox3D::make(rot * box.center + d, box.size, box.yaw + r);
        EXPECT_EQ(points_in_box(moved, moved_box), before);
    }
}

TEST(Yaw, NormalizationRange) {
    EXPECT_DOUBLE_EQ(normalize_yaw(std::numbers::pi), -std::numbers::pi);
    EXPECT_NEAR(normalize_yaw(3 * std::numbers::pi + 0.1), -std::numbers::pi + 0.1, 1e-12);
    EXPECT_NEAR(normalize_yaw(-0.5), -0.5, 1e-15);
}
