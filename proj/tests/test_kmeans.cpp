#include <gtest/gtest.h>

#include <algorithm>

#include "solider/kmeans.hpp"
#include "support/kmeans_oracle.hpp"

namespace solider {
namespace {

TEST(KMeans, WellSeparatedPairs) {
    const auto r = kmeans(std::vector<double>{0.0, 0.1, 10.0, 10.1}, 2, 1);
    EXPECT_EQ(r.assignments[0], r.assignments[1]);
    EXPECT_EQ(r.assignments[2], r.assignments[3]);
    EXPECT_NE(r.assignments[0], r.assignments[2]);
    std::vector<double> centers{r.centers[0][0], r.centers[1][0]};
    std::sort(centers.begin(), centers.end());
    EXPECT_NEAR(centers[0], 0.05, 1e-12);
    EXPECT_NEAR(centers[1], 10.05, 1e-12);
    EXPECT_NEAR(r.inertia, 4 * 0.05 * 0.05, 1e-12);
}

TEST(KMeans, KEqualsPointCountGivesZeroInertia) {
    const std::vector<std::vector<double>> pts{{0, 1}, {2, 3}, {-1, 5}, {4, 4}};
    const auto r = kmeans(pts, 4, 2);
    EXPECT_EQ(r.inertia, 0.0);
    std::vector<std::size_t> a = r.assignments;
    std::sort(a.begin(), a.end());
    EXPECT_EQ(a, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(KMeans, Errors) {
    EXPECT_THROW(kmeans(std::vector<double>{1.0}, 2, 0), std::invalid_argument);
    EXPECT_THROW(kmeans(std::vector<double>{1.0}, 0, 0), std::invalid_argument);
    EXPECT_THROW(kmeans(std::vector<std::vector<double>>{{1.0}, {1.0, 2.0}}, 1, 0), std::invalid_argument);
}

TEST(KMeans, MatchesBruteForceOptimum) {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const auto inst = testing::random_kmeans_instance(rng);
        const double oracle = testing::brute_force_inertia(inst.points, inst.k);
        const auto r = kmeans(inst.points, inst.k, rng.next_u64());
        EXPECT_NEAR(r.inertia, oracle, 1e-9 * std::max(1.0, oracle)) << "trial " << trial;
    }
}

TEST(KMeans, AssignmentsAreNearestCenterLowestIndexOnTies) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto inst = testing::random_kmeans_instance(rng);
        const auto r = kmeans(inst.points, inst.k, trial);
        for (std::size_t i = 0; i < inst.points.size(); ++i) {
            auto d = [&](std::size_t j) {
                double s = 0;
                for (std::size_t t = 0; t < inst.points[i].size(); ++t) s += std::pow(inst.points[i][t] - r.centers[j][t], 2);
                return s;
            };
            for (std::size_t j = 0; j < inst.k; ++j) {
                if (j < r.assignments[i]) EXPECT_GT(d(j), d(r.assignments[i]));
                else EXPECT_GE(d(j), d(r.assignments[i]));
            }
        }
    }
    // Equidistant point goes to center 0.
    const auto tie = detail::nearest({0.0}, {{-1.0}, {1.0}});
    EXPECT_EQ(tie.first, 0u);
}

TEST(KMeans, InertiaNonIncreasing) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> pts(40, std::vector<double>(3));
        for (auto& p : pts)
            for (auto& v : p) v = rng.normal();
        const auto r = kmeans(pts, 4, trial);
        ASSERT_FALSE(r.inertia_history.empty());
        for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
            EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1] + 1e-12);
        EXPECT_DOUBLE_EQ(r.inertia_history.back(), r.inertia);
        EXPECT_GE(r.iterations_run, 1u);
    }
}

TEST(KMeans, DeterministicPerSeed) {
    Rng rng(5);
    std::vector<std::vector<double>> pts(30, std::vector<double>(2));
    for (auto& p : pts)
        for (auto& v : p) v = rng.normal();
    const auto a = kmeans(pts, 3, 77), b = kmeans(pts, 3, 77);
    EXPECT_EQ(a.assignments, b.assignments);
    EXPECT_EQ(a.centers, b.centers);
}

TEST(KMeans, DuplicatePointsReachZeroInertia) {
    const std::vector<std::vector<double>> pts{{1.0}, {1.0}, {1.0}, {5.0}};
    const auto r = kmeans(pts, 3, 6);
    EXPECT_EQ(r.inertia, 0.0);
}

}  // namespace
}  // namespace solider
