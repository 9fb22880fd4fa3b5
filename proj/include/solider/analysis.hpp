#pragma once

// Representation diagnostics across the semantic ratio: part-level
// intra-image and inter-image cosine distances, plus frozen-feature linear
// probes for part labels and identities.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "solider/backbone.hpp"
#include "solider/data.hpp"
#include "solider/labeler.hpp"

namespace solider {

/// Final-stage features for a whole dataset, (count, h, w, c) row-major.
struct FeatureBank {
    std::size_t count = 0, height = 0, width = 0, channels = 0;
    double lambda = 0.0;
    std::vector<float> values;

    const float* token(std::size_t image, std::size_t t) const { return values.data() + (image * height * width + t) * channels; }

    FeatureMap<float> chunk(std::size_t first, std::size_t n) const {
        const std::size_t per = height * width * channels;
        std::vector<float> v(values.begin() + static_cast<long>(first * per), values.begin() + static_cast<long>((first + n) * per));
        return {Tensor<float>({n, height, width, channels}, std::move(v)), 0, lambda};
    }
};

template <typename T>
FeatureBank extract_features(const Backbone<T>& backbone, const Dataset& ds, ControlValue lam, std::size_t batch = 64) {
    NoGradGuard guard;
    FeatureBank bank;
    bank.count = ds.size();
    bank.lambda = lam.value();
    for (std::size_t first = 0; first < ds.size(); first += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = first; i < std::min(first + batch, ds.size()); ++i) idx.push_back(i);
        const auto fm = backbone.forward(ds.batch<T>(idx), lam);
        bank.height = fm.height();
        bank.width = fm.width();
        bank.channels = fm.channels();
        for (T v : fm.tokens.data()) bank.values.push_back(static_cast<float>(v));
    }
    return bank;
}

/// Pseudo labels for every image of the bank, labeled in fixed-size chunks.
inline std::vector<SemanticLabelMap> pseudo_labels(const FeatureBank& bank, std::uint64_t seed, const LabelerOptions& opt = {},
                                                   std::size_t batch = 64) {
    std::vector<SemanticLabelMap> out;
    for (std::size_t first = 0; first < bank.count; first += batch) {
        const std::size_t n = std::min(batch, bank.count - first);
        auto labels = pseudo_label(bank.chunk(first, n), derive_seed(seed, first), opt);
        for (auto& l : labels) out.push_back(std::move(l));
    }
    return out;
}

inline std::vector<SemanticLabelMap> ground_truth_labels(const Dataset& ds) {
    if (!ds.has_ground_truth()) throw DataError("dataset carries no ground-truth labels");
    std::vector<SemanticLabelMap> out;
    for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(ds.ground_truth(i));
    return out;
}

struct PartFeature {
    std::size_t image = 0;
    int part = 0;               // 1..N
    std::vector<double> mean;   // unit norm
};

/// Mean feature over each foreground part's tokens, L2-normalized.
/// Degenerate label maps and empty parts contribute nothing.
inline std::vector<PartFeature> build_part_features(const FeatureBank& bank, const std::vector<SemanticLabelMap>& labels) {
    if (labels.size() != bank.count) throw std::invalid_argument("part features: one label map per image required");
    std::vector<PartFeature> out;
    const std::size_t hw = bank.height * bank.width, c = bank.channels;
    for (std::size_t i = 0; i < bank.count; ++i) {
        const auto& lm = labels[i];
        if (lm.degenerate) continue;
        if (lm.height * lm.width != hw) throw std::invalid_argument("part features: label grid does not match feature grid");
        for (int p = 1; p <= static_cast<int>(lm.part_count); ++p) {
            std::vector<double> sum(c, 0.0);
            std::size_t n = 0;
            for (std::size_t t = 0; t < hw; ++t) {
                if (lm.labels[t] != p) continue;
                const float* f = bank.token(i, t);
                for (std::size_t k = 0; k < c; ++k) sum[k] += f[k];
                ++n;
            }
            if (n == 0) continue;
            double norm = 0.0;
            for (double v : sum) norm += v * v;
            norm = std::sqrt(norm);
            if (norm == 0.0) continue;
            for (double& v : sum) v /= norm;
            out.push_back({i, p, std::move(sum)});
        }
    }
    return out;
}

inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
    return std::clamp(1.0 - dot, 0.0, 2.0);
}

struct DistanceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Mean over images of the mean pairwise cosine distance between that
/// image's parts. Images with fewer than two parts are skipped and counted.
inline double intra_image_distance(const std::vector<PartFeature>& parts, std::size_t* excluded = nullptr) {
    std::map<std::size_t, std::vector<const PartFeature*>> by_image;
    for (const auto& p : parts) by_image[p.image].push_back(&p);
    double total = 0.0;
    std::size_t used = 0, skipped = 0;
    for (const auto& [_, ps] : by_image) {
        if (ps.size() < 2) {
            ++skipped;
            continue;
        }
        double s = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < ps.size(); ++a)
            for (std::size_t b = a + 1; b < ps.size(); ++b, ++pairs) s += cosine_distance(ps[a]->mean, ps[b]->mean);
        total += s / static_cast<double>(pairs);
        ++used;
    }
    if (excluded) *excluded = skipped;
    if (used == 0) throw DistanceError("intra-image distance: no image has two or more parts");
    return total / static_cast<double>(used);
}

/// Mean over part labels of the mean pairwise cosine distance between that
/// part's features from distinct images. The pairwise sum uses
/// sum_{i<j} (1 - v_i.v_j) = P - (|sum v|^2 - sum |v|^2) / 2.
inline double inter_image_distance(const std::vector<PartFeature>& parts) {
    std::map<int, std::vector<const PartFeature*>> by_part;
    for (const auto& p : parts) by_part[p.part].push_back(&p);
    double total = 0.0;
    std::size_t used = 0;
    for (const auto& [_, ps] : by_part) {
        const std::size_t n = ps.size();
        if (n < 2) continue;
        const std::size_t dim = ps.front()->mean.size();
        std::vector<double> sum(dim, 0.0);
        double self = 0.0;
        for (const auto* p : ps)
            for (std::size_t k = 0; k < dim; ++k) {
                sum[k] += p->mean[k];
                self += p->mean[k] * p->mean[k];
            }
        double sq = 0.0;
        for (double v : sum) sq += v * v;
        const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
        const double cross_dot = 0.5 * (sq - self);
        total += std::clamp((pairs - cross_dot) / pairs, 0.0, 2.0);
        ++used;
    }
    if (used == 0) throw DistanceError("inter-image distance: no part label is shared by two images");
    return total / static_cast<double>(used);
}

/// Average ranks (ties share the mean rank), 1-based.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

/// Pearson correlation of the ranks. Zero when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length series of length >= 2");
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// -------------------------------------------------------------------- probes

struct ProbeOptions {
    std::size_t max_iterations = 3000;
    double l2 = 1e-4;
    double tolerance = 1e-6;  // stop once the gradient's max-abs entry falls below
};

/// Multinomial logistic regression on standardized features, trained from
/// zero weights by accelerated gradient descent with step 1/L, where
/// L = lambda_max(Z'Z)/(2n) + l2 bounds the loss curvature, and a momentum
/// restart whenever the loss rises. Returns held-out accuracy. Labels are 0-based.
inline double linear_probe_accuracy(const Eigen::MatrixXd& x_train, const std::vector<int>& y_train, const Eigen::MatrixXd& x_test,
                                    const std::vector<int>& y_test, std::size_t classes, const ProbeOptions& opt = {}) {
    if (x_train.rows() == 0 || x_test.rows() == 0) throw std::invalid_argument("probe: empty split");
    const Eigen::RowVectorXd mu = x_train.colwise().mean();
    Eigen::RowVectorXd sd = ((x_train.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(x_train.rows())).sqrt();
    for (Eigen::Index k = 0; k < sd.size(); ++k)
        if (sd[k] < 1e-12) sd[k] = 1.0;
    auto standardize = [&](const Eigen::MatrixXd& x) {
        Eigen::MatrixXd z(x.rows(), x.cols() + 1);
        z.leftCols(x.cols()) = (x.rowwise() - mu).array().rowwise() / sd.array();
        z.col(x.cols()).setOnes();
        return z;
    };
    const Eigen::MatrixXd z = standardize(x_train), zt = standardize(x_test);
    const auto K = static_cast<Eigen::Index>(classes);
    const double inv_n = 1.0 / static_cast<double>(z.rows());
    const Eigen::MatrixXd gram = z.transpose() * z * inv_n;
    const double curvature = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    const double step = 1.0 / (0.5 * curvature + opt.l2);
    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(z.rows(), K);
    for (Eigen::Index i = 0; i < z.rows(); ++i) onehot(i, y_train[static_cast<std::size_t>(i)]) = 1.0;
    const Eigen::Index d = z.cols() - 1;  // bias row is not regularized
    auto loss_and_grad = [&](const Eigen::MatrixXd& w, Eigen::MatrixXd* grad) {
        Eigen::MatrixXd logits = z * w;
        const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
        logits = logits.colwise() - mx;
        Eigen::MatrixXd p = logits.array().exp();
        const Eigen::VectorXd s = p.rowwise().sum();
        p = p.array().colwise() / s.array();
        const double loss = (s.array().log() - (logits.array() * onehot.array()).rowwise().sum()).sum() * inv_n +
                            0.5 * opt.l2 * w.topRows(d).squaredNorm();
        if (grad) {
            *grad = z.transpose() * (p - onehot) * inv_n;
            grad->topRows(d) += opt.l2 * w.topRows(d);
        }
        return loss;
    };
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(z.cols(), K), y = w, grad;
    double t = 1.0, prev = loss_and_grad(w, nullptr);
    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        loss_and_grad(y, &grad);
        if (grad.cwiseAbs().maxCoeff() < opt.tolerance) break;
        const Eigen::MatrixXd next = y - step * grad;
        const double loss = loss_and_grad(next, nullptr);
        if (loss > prev) {
            y = w;
            t = 1.0;
            continue;
        }
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        y = next + ((t - 1.0) / t_next) * (next - w);
        w = next;
        t = t_next;
        prev = loss;
    }
    const Eigen::MatrixXd scores = zt * w;
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        if (static_cast<int>(best) == y_test[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

/// Deterministic held-out split: within each identity (or globally when
/// identities are unknown) every `stride`-th image is held out.
inline std::vector<bool> holdout_mask(const Dataset& ds, std::size_t stride = 4) {
    std::vector<bool> test(ds.size(), false);
    std::map<int, std::size_t> seen;
    for (std::size_t i = 0; i < ds.size(); ++i) test[i] = (seen[ds.identities[i]]++ % stride) == stride - 1;
    return test;
}

/// Token-level part probe: each token feature predicts its label (parts and
/// background). Degenerate label maps are left out.
inline double part_probe_accuracy(const FeatureBank& bank, const std::vector<SemanticLabelMap>& labels, const std::vector<bool>& test,
                                  const ProbeOptions& opt = {}) {
    const std::size_t hw = bank.height * bank.width, c = bank.channels;
    std::size_t n_train = 0, n_test = 0, classes = 0;
    for (std::size_t i = 0; i < bank.count; ++i) {
        if (labels[i].degenerate) continue;
        (test[i] ? n_test : n_train) += hw;
        classes = std::max(classes, labels[i].part_count + 1);
    }
    Eigen::MatrixXd xtr(static_cast<Eigen::Index>(n_train), static_cast<Eigen::Index>(c)),
        xte(static_cast<Eigen::Index>(n_test), static_cast<Eigen::Index>(c));
    std::vector<int> ytr, yte;
    for (std::size_t i = 0; i < bank.count; ++i) {
        if (labels[i].degenerate) continue;
        auto& x = test[i] ? xte : xtr;
        auto& y = test[i] ? yte : ytr;
        for (std::size_t t = 0; t < hw; ++t) {
            const auto row = static_cast<Eigen::Index>(y.size());
            const float* f = bank.token(i, t);
            for (std::size_t k = 0; k < c; ++k) x(row, static_cast<Eigen::Index>(k)) = f[k];
            y.push_back(labels[i].labels[t] - 1);
        }
    }
    return linear_probe_accuracy(xtr, ytr, xte, yte, classes, opt);
}

/// Image-level identity probe on globally pooled features.
inline double identity_probe_accuracy(const FeatureBank& bank, const Dataset& ds, const std::vector<bool>& test,
                                      const ProbeOptions& opt = {}) {
    std::map<int, int> id_index;
    for (int id : ds.identities)
        if (id >= 0) id_index.emplace(id, 0);
    if (id_index.size() < 2) throw std::invalid_argument("identity probe: needs at least two known identities");
    int next = 0;
    for (auto& [_, v] : id_index) v = next++;
    const std::size_t hw = bank.height * bank.width, c = bank.channels;
    std::vector<std::vector<double>> rows_tr, rows_te;
    std::vector<int> ytr, yte;
    for (std::size_t i = 0; i < bank.count; ++i) {
        if (ds.identities[i] < 0) continue;
        std::vector<double> pooled(c, 0.0);
        for (std::size_t t = 0; t < hw; ++t)
            for (std::size_t k = 0; k < c; ++k) pooled[k] += bank.token(i, t)[k] / static_cast<double>(hw);
        (test[i] ? rows_te : rows_tr).push_back(std::move(pooled));
        (test[i] ? yte : ytr).push_back(id_index[ds.identities[i]]);
    }
    auto to_matrix = [c](const std::vector<std::vector<double>>& rows) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(c));
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t k = 0; k < c; ++k) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
        return m;
    };
    return linear_probe_accuracy(to_matrix(rows_tr), ytr, to_matrix(rows_te), yte, id_index.size(), opt);
}

// --------------------------------------------------------------------- sweep

enum class LabelSource { pseudo, ground_truth };

struct SweepRow {
    double lambda = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double part_probe_acc = std::nan("");
    double id_probe_acc = std::nan("");
    std::size_t excluded_images = 0;
};

struct SweepOptions {
    LabelSource labels = LabelSource::ground_truth;
    bool probes = true;
    std::uint64_t seed = 0;
    LabelerOptions labeler;
    ProbeOptions probe;
};

/// Distances (and optionally probes) of the backbone's features at each
/// lambda. Ground-truth labels need a dataset that carries them; the part
/// probe always reads ground truth when available, else pseudo labels.
template <typename T>
std::vector<SweepRow> lambda_sweep(const Backbone<T>& backbone, const Dataset& ds, const std::vector<double>& grid,
                                   const SweepOptions& opt = {}) {
    if (ds.size() == 0) throw std::invalid_argument("lambda sweep: dataset is empty");
    std::vector<SweepRow> rows;
    const auto test = holdout_mask(ds);
    std::vector<SemanticLabelMap> gt;
    if (ds.has_ground_truth()) gt = ground_truth_labels(ds);
    for (double lam_value : grid) {
        const ControlValue lam(lam_value);
        const auto bank = extract_features(backbone, ds, lam);
        const auto labels = opt.labels == LabelSource::ground_truth ? (gt.empty() ? ground_truth_labels(ds) : gt)
                                                                    : pseudo_labels(bank, opt.seed, opt.labeler);
        const auto parts = build_part_features(bank, labels);
        SweepRow row;
        row.lambda = lam_value;
        row.intra = intra_image_distance(parts, &row.excluded_images);
        row.inter = inter_image_distance(parts);
        if (opt.probes) {
            row.part_probe_acc = part_probe_accuracy(bank, gt.empty() ? labels : gt, test, opt.probe);
            bool ids = false;
            for (int id : ds.identities) ids = ids || id >= 0;
            if (ids) row.id_probe_acc = identity_probe_accuracy(bank, ds, test, opt.probe);
        }
        rows.push_back(row);
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out.precision(9);
    out << "lambda,intra,inter,part_probe_acc,id_probe_acc\n";
    for (const auto& r : rows) out << r.lambda << ',' << r.intra << ',' << r.inter << ',' << r.part_probe_acc << ',' << r.id_probe_acc << '\n';
    os << out.str();
}

/// One row per part feature: image, part, then the vector components.
inline void write_part_features_csv(std::ostream& os, const std::vector<PartFeature>& parts, double lambda) {
    std::ostringstream out;
    out.precision(9);
    out << "lambda,image,part";
    if (!parts.empty())
        for (std::size_t k = 0; k < parts.front().mean.size(); ++k) out << ",f" << k;
    out << '\n';
    for (const auto& p : parts) {
        out << lambda << ',' << p.image << ',' << p.part;
        for (double v : p.mean) out << ',' << v;
        out << '\n';
    }
    os << out.str();
}

}  // namespace solider
