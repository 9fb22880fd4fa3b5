#pragma once

// Lloyd's k-means with k-means++ seeding and best-of-n restarts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "solider/rng.hpp"

namespace solider {

struct KMeansOptions {
    std::size_t max_iter = 100;
    double tol = 1e-8;
    std::size_t restarts = 50;
};

struct KMeansResult {
    std::vector<std::size_t> assignments;
    std::vector<std::vector<double>> centers;
    double inertia = 0.0;
    std::size_t iterations_run = 0;
    std::vector<double> inertia_history;  // one entry per assignment step of the winning restart
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Nearest center, ties to the lowest index.
inline std::pair<std::size_t, double> nearest(const std::vector<double>& p, const std::vector<std::vector<double>>& centers) {
    std::size_t best = 0;
    double bd = sq_dist(p, centers[0]);
    for (std::size_t j = 1; j < centers.size(); ++j) {
        const double d = sq_dist(p, centers[j]);
        if (d < bd) {
            bd = d;
            best = j;
        }
    }
    return {best, bd};
}

inline std::vector<std::vector<double>> kmeanspp_seed(const std::vector<std::vector<double>>& pts, std::size_t k, Rng& rng) {
    std::vector<std::vector<double>> centers;
    centers.push_back(pts[rng.index(pts.size())]);
    std::vector<double> d2(pts.size());
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) total += (d2[i] = nearest(pts[i], centers).second);
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = rng.index(pts.size());
        } else {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            pick = pts.size() - 1;
            for (std::size_t i = 0; i < pts.size(); ++i) {
                acc += d2[i];
                if (acc > r && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(pts[pick]);
    }
    return centers;
}

inline KMeansResult lloyd(const std::vector<std::vector<double>>& pts, std::vector<std::vector<double>> centers,
                          const KMeansOptions& opt) {
    const std::size_t n = pts.size(), k = centers.size(), dim = pts[0].size();
    KMeansResult res;
    res.assignments.assign(n, 0);
    std::vector<double> cost(n);
    for (std::size_t it = 0; it < std::max<std::size_t>(opt.max_iter, 1); ++it) {
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            auto [j, d] = nearest(pts[i], centers);
            res.assignments[i] = j;
            cost[i] = d;
            inertia += d;
        }
        // Empty clusters take the point farthest from its center.
        std::vector<std::size_t> count(k, 0);
        for (auto a : res.assignments) ++count[a];
        for (std::size_t j = 0; j < k; ++j) {
            if (count[j]) continue;
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i)
                if (count[res.assignments[i]] > 1 && (far == n || cost[i] > cost[far])) far = i;
            if (far == n) break;
            --count[res.assignments[far]];
            inertia -= cost[far];
            cost[far] = 0.0;
            res.assignments[far] = j;
            count[j] = 1;
        }
        res.inertia_history.push_back(inertia);
        res.iterations_run = it + 1;

        std::vector<std::vector<double>> next(k, std::vector<double>(dim, 0.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t d = 0; d < dim; ++d) next[res.assignments[i]][d] += pts[i][d];
        double movement = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (!count[j]) {
                next[j] = centers[j];
                continue;
            }
            for (auto& v : next[j]) v /= static_cast<double>(count[j]);
            movement = std::max(movement, std::sqrt(sq_dist(next[j], centers[j])));
        }
        centers = std::move(next);
        if (movement < opt.tol) break;
    }
    // Final assignment against the final centers.
    res.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        auto [j, d] = nearest(pts[i], centers);
        res.assignments[i] = j;
        res.inertia += d;
    }
    res.inertia_history.push_back(res.inertia);
    res.centers = std::move(centers);
    return res;
}

}  // namespace detail

/// Clusters points into k groups. Each restart seeds with k-means++ from a
/// stream derived from seed; the lowest-inertia restart wins (first on ties).
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
    if (k < 1) throw std::invalid_argument("kmeans: k must be at least 1");
    if (points.size() < k)
        throw std::invalid_argument("kmeans: " + std::to_string(points.size()) + " points is fewer than k = " + std::to_string(k));
    const std::size_t dim = points[0].size();
    for (const auto& p : points)
        if (p.size() != dim) throw std::invalid_argument("kmeans: points have inconsistent dimensions");
    KMeansResult best;
    bool have = false;
    for (std::size_t r = 0; r < std::max<std::size_t>(opt.restarts, 1); ++r) {
        Rng rng(derive_seed(seed, r));
        auto res = detail::lloyd(points, detail::kmeanspp_seed(points, k, rng), opt);
        if (!have || res.inertia < best.inertia) {
            best = std::move(res);
            have = true;
        }
    }
    return best;
}

inline KMeansResult kmeans(const std::vector<double>& values_1d, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
    std::vector<std::vector<double>> pts;
    pts.reserve(values_1d.size());
    for (double v : values_1d) pts.push_back({v});
    return kmeans(pts, k, seed, opt);
}

}  // namespace solider
