#pragma once

// Pseudo semantic labels from the human-figure prior: per-image
// foreground/background split on token magnitudes, k-means over foreground
// tokens, and top-to-bottom ordering of the resulting parts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "solider/backbone.hpp"
#include "solider/kmeans.hpp"

namespace solider {

struct ForegroundMask {
    std::size_t height = 0, width = 0;
    std::vector<bool> mask;  // row-major, true = foreground
    bool degenerate = false;

    bool at(std::size_t r, std::size_t c) const { return mask[r * width + c]; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Labels 1..N are parts ordered top to bottom; N+1 is background.
struct SemanticLabelMap {
    std::size_t height = 0, width = 0;
    std::size_t part_count = 0;
    std::vector<int> labels;  // row-major
    bool degenerate = false;

    int at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
    int background() const { return static_cast<int>(part_count) + 1; }
};

struct LabelerOptions {
    std::size_t parts = 3;
    double degenerate_tol = 1e-6;
    KMeansOptions kmeans{100, 1e-8, 10};  // per-image, per-step: fewer restarts
};

/// Token L2 norms of image i, row-major.
template <typename T>
std::vector<double> token_norms(const FeatureMap<T>& fm, std::size_t image) {
    const std::size_t hw = fm.height() * fm.width(), c = fm.channels();
    std::vector<double> norms(hw);
    const T* base = fm.tokens.data().data() + image * hw * c;
    for (std::size_t t = 0; t < hw; ++t) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += static_cast<double>(base[t * c + k]) * static_cast<double>(base[t * c + k]);
        norms[t] = std::sqrt(s);
    }
    return norms;
}

/// Two-way 1-D k-means on token norms per image; the cluster with the larger
/// mean norm is foreground. Images whose norms are all equal (within tol, or
/// that end with an empty side) are flagged degenerate.
template <typename T>
std::vector<ForegroundMask> split_foreground(const FeatureMap<T>& fm_t, std::uint64_t seed, const LabelerOptions& opt = {}) {
    std::vector<ForegroundMask> out(fm_t.batch());
    const std::size_t h = fm_t.height(), w = fm_t.width();
    for (std::size_t i = 0; i < fm_t.batch(); ++i) {
        auto& m = out[i];
        m.height = h;
        m.width = w;
        m.mask.assign(h * w, false);
        const auto norms = token_norms(fm_t, i);
        const auto [lo, hi] = std::minmax_element(norms.begin(), norms.end());
        if (*hi - *lo <= opt.degenerate_tol * std::max(1.0, *hi) || norms.size() < 2) {
            m.degenerate = true;
            continue;
        }
        const auto km = kmeans(norms, 2, derive_seed(seed, i), opt.kmeans);
        const std::size_t fg = km.centers[1][0] > km.centers[0][0] ? 1 : 0;
        for (std::size_t t = 0; t < norms.size(); ++t) m.mask[t] = km.assignments[t] == fg;
        const std::size_t n_fg = m.count();
        if (n_fg == 0 || n_fg == norms.size()) m.degenerate = true;
    }
    return out;
}

/// Cluster order by ascending mean row, then mean column, then cluster id.
/// `grid` holds cluster ids in [0, k) for foreground tokens and -1 elsewhere.
inline std::vector<std::size_t> assign_part_order(const std::vector<int>& grid, std::size_t width, std::size_t k) {
    if (width == 0 || grid.size() % width) throw std::invalid_argument("assign_part_order: grid not rectangular");
    std::vector<double> row_sum(k, 0.0), col_sum(k, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t t = 0; t < grid.size(); ++t) {
        const int id = grid[t];
        if (id < 0) continue;
        if (static_cast<std::size_t>(id) >= k) throw std::invalid_argument("assign_part_order: cluster id out of range");
        row_sum[id] += static_cast<double>(t / width);
        col_sum[id] += static_cast<double>(t % width);
        ++count[id];
    }
    for (std::size_t j = 0; j < k; ++j)
        if (!count[j]) throw std::invalid_argument("assign_part_order: cluster " + std::to_string(j) + " is empty");
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ra = row_sum[a] / count[a], rb = row_sum[b] / count[b];
        if (ra != rb) return ra < rb;
        const double ca = col_sum[a] / count[a], cb = col_sum[b] / count[b];
        if (ca != cb) return ca < cb;
        return a < b;
    });
    return order;
}

/// Per-image k-means (k = N) over foreground token vectors; clusters are
/// relabeled 1..N top to bottom and background becomes N+1.
template <typename T>
std::vector<SemanticLabelMap> cluster_parts(const FeatureMap<T>& fm_t, const std::vector<ForegroundMask>& masks,
                                            std::uint64_t seed, const LabelerOptions& opt = {}) {
    const std::size_t N = opt.parts;
    if (N < 1) throw std::invalid_argument("cluster_parts: part count must be at least 1");
    if (masks.size() != fm_t.batch()) throw std::invalid_argument("cluster_parts: one mask per image required");
    const std::size_t h = fm_t.height(), w = fm_t.width(), c = fm_t.channels(), hw = h * w;
    std::vector<SemanticLabelMap> out(fm_t.batch());
    for (std::size_t i = 0; i < fm_t.batch(); ++i) {
        auto& lm = out[i];
        lm.height = h;
        lm.width = w;
        lm.part_count = N;
        lm.labels.assign(hw, static_cast<int>(N) + 1);
        const auto& m = masks[i];
        if (m.height != h || m.width != w) throw std::invalid_argument("cluster_parts: mask does not match the token grid");
        if (m.degenerate || m.count() < N) {
            lm.degenerate = true;
            continue;
        }
        std::vector<std::vector<double>> pts;
        std::vector<std::size_t> where;
        const T* base = fm_t.tokens.data().data() + i * hw * c;
        for (std::size_t t = 0; t < hw; ++t) {
            if (!m.mask[t]) continue;
            pts.emplace_back(base + t * c, base + (t + 1) * c);
            where.push_back(t);
        }
        const auto km = kmeans(pts, N, derive_seed(seed, i), opt.kmeans);
        std::vector<int> grid(hw, -1);
        for (std::size_t p = 0; p < where.size(); ++p) grid[where[p]] = static_cast<int>(km.assignments[p]);
        std::vector<std::size_t> order;
        try {
            order = assign_part_order(grid, w, N);
        } catch (const std::invalid_argument&) {
            lm.degenerate = true;  // duplicate foreground vectors left a cluster empty
            continue;
        }
        std::vector<int> rank(N);
        for (std::size_t r = 0; r < N; ++r) rank[order[r]] = static_cast<int>(r) + 1;
        for (std::size_t p = 0; p < where.size(); ++p) lm.labels[where[p]] = rank[km.assignments[p]];
    }
    return out;
}

/// Full labeling pass on detached teacher features.
template <typename T>
std::vector<SemanticLabelMap> pseudo_label(const FeatureMap<T>& fm_t, std::uint64_t seed, const LabelerOptions& opt = {}) {
    auto masks = split_foreground(fm_t, derive_seed(seed, 0xF6), opt);
    return cluster_parts(fm_t, masks, derive_seed(seed, 0xC1), opt);
}

/// Zeroes every pixel of the patches whose token carries one randomly chosen
/// part label. Degenerate images pass through unmasked with part 0.
template <typename T>
std::pair<ImageBatch<T>, std::vector<int>> mask_part(const ImageBatch<T>& images, const std::vector<SemanticLabelMap>& labels,
                                                     std::uint64_t seed) {
    const auto& s = images.pixels.shape();
    const std::size_t n = s[0], C = s[1], H = s[2], W = s[3];
    if (labels.size() != n) throw std::invalid_argument("mask_part: one label map per image required");
    std::vector<T> px = images.pixels.data();
    std::vector<int> chosen(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& lm = labels[i];
        if (lm.degenerate) continue;
        if (H % lm.height || W % lm.width) throw std::invalid_argument("mask_part: label grid does not tile the image");
        const std::size_t ch = H / lm.height, cw = W / lm.width;
        const std::size_t id = i < images.source_ids.size() ? images.source_ids[i] : i;
        Rng rng(derive_seed(seed, id));
        const int part = 1 + static_cast<int>(rng.index(lm.part_count));
        chosen[i] = part;
        for (std::size_t r = 0; r < H; ++r)
            for (std::size_t col = 0; col < W; ++col)
                if (lm.at(r / ch, col / cw) == part)
                    for (std::size_t k = 0; k < C; ++k) px[((i * C + k) * H + r) * W + col] = T(0);
    }
    return {ImageBatch<T>{Tensor<T>(s, std::move(px)), images.source_ids}, chosen};
}

}  // namespace solider
