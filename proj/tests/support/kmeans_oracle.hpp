#pragma once

// Exhaustive k-means oracle: the minimum within-cluster sum of squares over
// every assignment of points to k labels.

#include <limits>
#include <vector>

#include "solider/rng.hpp"

namespace solider::testing {

inline double partition_cost(const std::vector<std::vector<double>>& pts, const std::vector<std::size_t>& label, std::size_t k) {
    const std::size_t dim = pts[0].size();
    std::vector<std::vector<double>> sum(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        ++count[label[i]];
        for (std::size_t d = 0; d < dim; ++d) sum[label[i]][d] += pts[i][d];
    }
    double cost = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = pts[i][d] - sum[label[i]][d] / static_cast<double>(count[label[i]]);
            cost += diff * diff;
        }
    return cost;
}

inline double brute_force_inertia(const std::vector<std::vector<double>>& pts, std::size_t k) {
    const std::size_t n = pts.size();
    std::vector<std::size_t> label(n, 0);
    double best = std::numeric_limits<double>::infinity();
    while (true) {
        best = std::min(best, partition_cost(pts, label, k));
        std::size_t i = 0;
        while (i < n && ++label[i] == k) label[i++] = 0;
        if (i == n) break;
    }
    return best;
}

struct KMeansInstance {
    std::vector<std::vector<double>> points;
    std::size_t k = 1;
};

/// Up to 8 points in 1..3 dimensions, k in 1..min(3, n).
inline KMeansInstance random_kmeans_instance(Rng& rng) {
    KMeansInstance inst;
    const std::size_t n = 1 + rng.index(8);
    const std::size_t dim = 1 + rng.index(3);
    inst.k = 1 + rng.index(std::min<std::size_t>(3, n));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p(dim);
        for (auto& v : p) v = rng.normal(0.0, 2.0);
        inst.points.push_back(std::move(p));
    }
    return inst;
}

}  // namespace solider::testing
