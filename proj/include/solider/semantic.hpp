#pragma once

// Token-level semantic classification head and loss, including the masked
// re-feed path.

#include <functional>
#include <string>
#include <vector>

#include "solider/labeler.hpp"
#include "solider/nn.hpp"

namespace solider {

struct SemanticHeadConfig {
    std::size_t blocks = 2;
    std::size_t hidden = 64;
    std::size_t parts = 3;
};

template <typename T>
struct TokenLogits {
    Tensor<T> logits;  // (n*h*w, N+1); row = image*(h*w) + row*w + col
    std::size_t images = 0, height = 0, width = 0;
};

/// Blocks of (linear, batch norm, relu) followed by a linear classifier over
/// N+1 classes.
template <typename T>
struct SemanticHead {
    std::vector<Linear<T>> fcs;
    std::vector<LayerNorm<T>> bn_affine;  // gamma/beta storage for each batch norm
    std::vector<ops::BatchNormStats<T>> bn_stats;
    Linear<T> classifier;
    bool training = true;

    SemanticHead() = default;
    SemanticHead(std::size_t in_dim, const SemanticHeadConfig& cfg, Rng& rng, bool zero_classifier = false) {
        std::size_t d = in_dim;
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            fcs.emplace_back(d, cfg.hidden, rng, true, 1.0 / std::sqrt(static_cast<double>(d)));
            bn_affine.emplace_back(cfg.hidden);
            bn_stats.emplace_back(cfg.hidden);
            d = cfg.hidden;
        }
        classifier = Linear<T>(d, cfg.parts + 1, rng, true, 1.0 / std::sqrt(static_cast<double>(d)));
        if (zero_classifier) std::fill(classifier.weight.data().begin(), classifier.weight.data().end(), T(0));
    }

    std::size_t in_dim() const { return fcs.empty() ? classifier.in_features() : fcs.front().in_features(); }
    std::size_t classes() const { return classifier.out_features(); }

    /// (rows, c) -> (rows, N+1)
    Tensor<T> forward_rows(const Tensor<T>& rows) {
        Tensor<T> x = rows;
        for (std::size_t b = 0; b < fcs.size(); ++b)
            x = ops::relu(ops::batch_norm(fcs[b](x), bn_affine[b].gamma, bn_affine[b].beta, bn_stats[b], training));
        return classifier(x);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        for (std::size_t b = 0; b < fcs.size(); ++b) {
            fcs[b].collect(ps, prefix + ".block" + std::to_string(b) + ".fc");
            bn_affine[b].collect(ps, prefix + ".block" + std::to_string(b) + ".bn");
        }
        classifier.collect(ps, prefix + ".classifier");
    }
};

/// Flattens (n, h, w, c) tokens to (n*h*w, c), optionally keeping only the
/// listed images, and classifies every row.
template <typename T>
TokenLogits<T> semantic_head_forward(const FeatureMap<T>& fm_s, SemanticHead<T>& head,
                                     const std::vector<std::size_t>* keep_images = nullptr) {
    const std::size_t n = fm_s.batch(), h = fm_s.height(), w = fm_s.width(), c = fm_s.channels();
    if (c != head.in_dim())
        throw ShapeError("semantic head: feature channels " + std::to_string(c) + " vs head input " + std::to_string(head.in_dim()));
    auto flat = ops::reshape(fm_s.tokens, {n * h * w, c});
    std::size_t used = n;
    if (keep_images && keep_images->size() != n) {
        std::vector<std::size_t> rows;
        for (auto img : *keep_images)
            for (std::size_t t = 0; t < h * w; ++t) rows.push_back(img * h * w + t);
        flat = ops::embedding(flat, rows);
        used = keep_images->size();
    }
    return {head.forward_rows(flat), used, h, w};
}

/// Mean token cross-entropy over all tokens of the given label maps
/// (background included as class N+1), then mean over images.
template <typename T>
Tensor<T> semantic_loss(const TokenLogits<T>& logits, const std::vector<const SemanticLabelMap*>& labels) {
    const std::size_t hw = logits.height * logits.width;
    if (labels.size() != logits.images || logits.logits.size(0) != labels.size() * hw)
        throw std::invalid_argument("semantic_loss: " + std::to_string(labels.size()) + " label maps for " +
                                    std::to_string(logits.logits.size(0)) + " token rows");
    std::vector<int> flat;
    flat.reserve(labels.size() * hw);
    for (const auto* lm : labels) {
        if (lm->height * lm->width != hw) throw std::invalid_argument("semantic_loss: label grid misaligned with logits");
        if (lm->part_count + 1 != logits.logits.size(1))
            throw std::invalid_argument("semantic_loss: label classes do not match logit width");
        flat.insert(flat.end(), lm->labels.begin(), lm->labels.end());
    }
    // Every image has the same token count, so the global token mean equals
    // the per-image mean averaged over images.
    return ops::cross_entropy_hard(logits.logits, flat);
}

template <typename T>
Tensor<T> semantic_loss(const TokenLogits<T>& logits, const std::vector<SemanticLabelMap>& labels) {
    std::vector<const SemanticLabelMap*> ptrs;
    for (const auto& l : labels) ptrs.push_back(&l);
    return semantic_loss(logits, ptrs);
}

/// Indices of non-degenerate label maps.
inline std::vector<std::size_t> valid_images(const std::vector<SemanticLabelMap>& labels) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (!labels[i].degenerate) keep.push_back(i);
    return keep;
}

/// L_sm over the non-degenerate images of a batch. Degenerate images never
/// reach the head, so they contribute neither loss nor gradient nor batch
/// statistics. Returns an untracked zero when no image is usable.
template <typename T>
Tensor<T> batch_semantic_loss(const FeatureMap<T>& fm_s, SemanticHead<T>& head, const std::vector<SemanticLabelMap>& labels) {
    if (labels.size() != fm_s.batch()) throw std::invalid_argument("semantic loss: one label map per image required");
    const auto keep = valid_images(labels);
    if (keep.empty()) return Tensor<T>::scalar(T(0));
    auto logits = semantic_head_forward(fm_s, head, &keep);
    std::vector<const SemanticLabelMap*> ptrs;
    for (auto i : keep) ptrs.push_back(&labels[i]);
    return semantic_loss(logits, ptrs);
}

/// (L_sm(x) + L_sm(x~)) / 2 where x~ has one pseudo-labeled part masked and is
/// supervised with the original labels. `student` maps an image batch to its
/// feature map at the current lambda; `features_x`, when given, is reused for
/// the unmasked term.
template <typename T>
Tensor<T> masked_refeed_loss(const ImageBatch<T>& images, const std::vector<SemanticLabelMap>& labels,
                             const std::function<FeatureMap<T>(const ImageBatch<T>&)>& student, SemanticHead<T>& head,
                             std::uint64_t seed, bool masking_enabled = true, const FeatureMap<T>* features_x = nullptr,
                             std::vector<int>* chosen_parts = nullptr) {
    const FeatureMap<T> fx = features_x ? *features_x : student(images);
    auto l_x = batch_semantic_loss(fx, head, labels);
    if (!masking_enabled) return l_x;
    auto [masked, chosen] = mask_part(images, labels, seed);
    if (chosen_parts) *chosen_parts = chosen;
    auto l_masked = batch_semantic_loss(student(masked), head, labels);
    return ops::scale(ops::add(l_x, l_masked), T(0.5));
}

}  // namespace solider
