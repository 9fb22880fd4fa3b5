#pragma once

// Teacher-student self-distillation: projection head, centered and
// sharpened cross-entropy, EMA teacher, center tracking, and two-view
// augmentation.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "solider/backbone.hpp"
#include "solider/nn.hpp"

namespace solider {

struct ProjectionHeadConfig {
    std::size_t hidden = 256;
    std::size_t prototypes = 1024;
};

/// in -> hidden -> hidden -> l2-normalize -> weight-normalized K prototypes.
template <typename T>
struct ProjectionHead {
    Linear<T> fc1, fc2;
    Tensor<T> prototypes;  // (K, hidden), rows normalized at use

    ProjectionHead() = default;
    ProjectionHead(std::size_t in_dim, const ProjectionHeadConfig& cfg, Rng& rng)
        : fc1(in_dim, cfg.hidden, rng),
          fc2(cfg.hidden, cfg.hidden, rng),
          prototypes({cfg.prototypes, cfg.hidden}, init::trunc_normal<T>(cfg.prototypes * cfg.hidden, 0.02, rng), true) {}

    std::size_t out_dim() const { return prototypes.size(0); }

    /// pooled (n, in_dim) -> logits (n, K)
    Tensor<T> forward(const Tensor<T>& pooled) const {
        auto h = ops::gelu(fc2(ops::gelu(fc1(pooled))));
        auto z = ops::l2_normalize(h, -1);
        auto w = ops::l2_normalize(prototypes, -1);
        return ops::matmul(z, ops::transpose(w));
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        fc1.collect(ps, prefix + ".fc1");
        fc2.collect(ps, prefix + ".fc2");
        ps.add(prefix + ".prototypes", prototypes);
    }
};

/// Global average over the token grid: (n, h, w, c) -> (n, c).
template <typename T>
Tensor<T> global_pool(const FeatureMap<T>& fm) {
    auto flat = ops::reshape(fm.tokens, {fm.batch(), fm.height() * fm.width(), fm.channels()});
    return ops::mean(flat, 1);
}

/// softmax((logits - center) / temp) row-wise, gradient-free.
template <typename T>
Tensor<T> teacher_distribution(const Tensor<T>& teacher_logits, const Tensor<T>& center, T temp_t) {
    NoGradGuard guard;
    auto centered = ops::sub(teacher_logits.detach(), center.detach());
    return ops::softmax(ops::scale(centered, T(1) / temp_t), -1).detach();
}

/// Mean over the batch of -sum_k P_t log P_s. Teacher logits never receive
/// gradient.
template <typename T>
Tensor<T> dino_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, const Tensor<T>& center, T temp_s,
                    T temp_t) {
    if (!(temp_s > T(0)) || !(temp_t > T(0))) throw std::invalid_argument("dino_loss: temperatures must be positive");
    if (student_logits.dim() != 2 || student_logits.shape() != teacher_logits.shape() ||
        center.numel() != student_logits.size(1))
        throw ShapeError("dino_loss: student " + shape_str(student_logits.shape()) + ", teacher " +
                         shape_str(teacher_logits.shape()) + ", center " + shape_str(center.shape()));
    auto pt = teacher_distribution(teacher_logits, center, temp_t);
    return ops::cross_entropy_soft(ops::scale(student_logits, T(1) / temp_s), pt);
}

/// teacher <- m * teacher + (1 - m) * student for every teacher parameter.
/// The whole structure is validated before any value is written.
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, T m) {
    if (!(m >= T(0) && m < T(1))) throw std::invalid_argument("ema_update: momentum must be in [0,1)");
    for (const auto& [name, t] : teacher.entries()) {
        if (!student.contains(name)) throw StructureMismatch("ema_update: student has no parameter " + name);
        if (student.at(name).shape() != t.shape())
            throw StructureMismatch("ema_update: parameter " + name + " shape " + shape_str(t.shape()) + " vs " +
                                    shape_str(student.at(name).shape()));
    }
    const T keep = m, take = T(1) - m;
    for (auto& [name, t] : teacher.entries()) {
        auto& td = t.data();
        const auto& sd = student.at(name).data();
        for (std::size_t i = 0; i < td.size(); ++i) td[i] = keep * td[i] + take * sd[i];
    }
}

/// center <- momentum * center + (1 - momentum) * mean over rows of logits.
template <typename T>
Tensor<T> center_update(const Tensor<T>& center, const Tensor<T>& teacher_batch_logits, T momentum) {
    if (!(momentum >= T(0) && momentum <= T(1))) throw std::invalid_argument("center_update: momentum must be in [0,1]");
    if (teacher_batch_logits.dim() != 2 || teacher_batch_logits.size(1) != center.numel())
        throw ShapeError("center_update: logits " + shape_str(teacher_batch_logits.shape()) + " vs center " +
                         shape_str(center.shape()));
    const std::size_t n = teacher_batch_logits.size(0), K = center.numel();
    std::vector<T> batch_mean(K, T(0));
    const auto& d = teacher_batch_logits.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < K; ++k) batch_mean[k] += d[i * K + k];
    std::vector<T> out(K);
    for (std::size_t k = 0; k < K; ++k)
        out[k] = momentum * center.data()[k] + (T(1) - momentum) * (batch_mean[k] / static_cast<T>(n));
    return Tensor<T>(center.shape(), std::move(out));
}

// ------------------------------------------------------------- augmentation

struct AugmentConfig {
    double crop_min_scale = 0.6;
    double crop_max_scale = 1.0;
    double crop_min_ratio = 3.0 / 4.0;
    double crop_max_ratio = 4.0 / 3.0;
    double flip_prob = 0.5;
    double brightness = 0.4;
    double contrast = 0.4;
    double saturation = 0.4;

    static AugmentConfig identity() {
        AugmentConfig a;
        a.crop_min_scale = a.crop_max_scale = 1.0;
        a.crop_min_ratio = a.crop_max_ratio = 1.0;
        a.flip_prob = 0.0;
        a.brightness = a.contrast = a.saturation = 0.0;
        return a;
    }

    void validate() const {
        if (!(crop_min_scale > 0 && crop_min_scale <= crop_max_scale && crop_max_scale <= 1.0))
            throw std::invalid_argument("augment: crop scales must satisfy 0 < min <= max <= 1");
        if (!(crop_min_ratio > 0 && crop_min_ratio <= crop_max_ratio))
            throw std::invalid_argument("augment: crop ratios must satisfy 0 < min <= max");
        if (flip_prob < 0 || flip_prob > 1 || brightness < 0 || contrast < 0 || contrast >= 1 || saturation < 0 ||
            saturation >= 1)
            throw std::invalid_argument("augment: jitter parameters out of range");
    }
};

namespace detail {

/// Bilinear resample of one channel plane; pixel centers are aligned so an
/// equal-size resample is an exact copy.
template <typename T>
void resample_plane(const T* src, std::size_t sh, std::size_t sw, double y0, double x0, double ch, double cw, T* dst,
                    std::size_t dh, std::size_t dw) {
    const double fy = ch / static_cast<double>(dh), fx = cw / static_cast<double>(dw);
    for (std::size_t r = 0; r < dh; ++r) {
        double sy = y0 + (static_cast<double>(r) + 0.5) * fy - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(sh - 1));
        const std::size_t r0 = static_cast<std::size_t>(std::floor(sy));
        const std::size_t r1 = std::min(r0 + 1, sh - 1);
        const T wy = static_cast<T>(sy - static_cast<double>(r0));
        for (std::size_t c = 0; c < dw; ++c) {
            double sx = x0 + (static_cast<double>(c) + 0.5) * fx - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(sw - 1));
            const std::size_t c0 = static_cast<std::size_t>(std::floor(sx));
            const std::size_t c1 = std::min(c0 + 1, sw - 1);
            const T wx = static_cast<T>(sx - static_cast<double>(c0));
            const T top = src[r0 * sw + c0] * (T(1) - wx) + src[r0 * sw + c1] * wx;
            const T bot = src[r1 * sw + c0] * (T(1) - wx) + src[r1 * sw + c1] * wx;
            dst[r * dw + c] = wy == T(0) ? top : top * (T(1) - wy) + bot * wy;
        }
    }
}

template <typename T>
void augment_image(const T* src, std::size_t C, std::size_t H, std::size_t W, const AugmentConfig& cfg, Rng& rng, T* dst) {
    // Random resized crop.
    const double scale = rng.uniform(cfg.crop_min_scale, cfg.crop_max_scale);
    const double log_r = rng.uniform(std::log(cfg.crop_min_ratio), std::log(cfg.crop_max_ratio));
    const double ratio = std::exp(log_r);
    double cw = std::min(static_cast<double>(W), std::round(static_cast<double>(W) * std::sqrt(scale * ratio)));
    double ch = std::min(static_cast<double>(H), std::round(static_cast<double>(H) * std::sqrt(scale / ratio)));
    cw = std::max(cw, 1.0);
    ch = std::max(ch, 1.0);
    const double y0 = std::floor(rng.uniform() * (static_cast<double>(H) - ch + 1.0));
    const double x0 = std::floor(rng.uniform() * (static_cast<double>(W) - cw + 1.0));
    const bool flip = rng.uniform() < cfg.flip_prob;
    const double b = rng.uniform(-cfg.brightness, cfg.brightness);
    const double k = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    const double s = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);

    const std::size_t plane = H * W;
    for (std::size_t c = 0; c < C; ++c) {
        resample_plane(src + c * plane, H, W, y0, x0, ch, cw, dst + c * plane, H, W);
        if (flip)
            for (std::size_t r = 0; r < H; ++r) std::reverse(dst + c * plane + r * W, dst + c * plane + (r + 1) * W);
    }
    if (cfg.brightness == 0.0 && cfg.contrast == 0.0 && cfg.saturation == 0.0) return;
    // Saturation blends towards the per-pixel channel mean; contrast scales
    // around the image mean; brightness shifts.
    T img_mean = T(0);
    for (std::size_t i = 0; i < C * plane; ++i) img_mean += dst[i];
    img_mean /= static_cast<T>(C * plane);
    for (std::size_t p = 0; p < plane; ++p) {
        T gray = T(0);
        for (std::size_t c = 0; c < C; ++c) gray += dst[c * plane + p];
        gray /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
            T v = gray + static_cast<T>(s) * (dst[c * plane + p] - gray);
            v = img_mean + static_cast<T>(k) * (v - img_mean);
            dst[c * plane + p] = v + static_cast<T>(b);
        }
    }
}

}  // namespace detail

/// Two independently augmented views. Each image/view pair draws from its own
/// stream derived from (seed, source id, view), so results do not depend on
/// batch composition.
template <typename T>
std::pair<ImageBatch<T>, ImageBatch<T>> make_views(const ImageBatch<T>& images, const AugmentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto& s = images.pixels.shape();
    const std::size_t n = s[0], C = s[1], H = s[2], W = s[3];
    const std::size_t per = C * H * W;
    std::vector<T> v1(n * per), v2(n * per);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t id = i < images.source_ids.size() ? images.source_ids[i] : i;
        Rng r1(derive_seed(seed, id, 1)), r2(derive_seed(seed, id, 2));
        detail::augment_image(images.pixels.data().data() + i * per, C, H, W, cfg, r1, v1.data() + i * per);
        detail::augment_image(images.pixels.data().data() + i * per, C, H, W, cfg, r2, v2.data() + i * per);
    }
    return {ImageBatch<T>{Tensor<T>(s, std::move(v1)), images.source_ids},
            ImageBatch<T>{Tensor<T>(s, std::move(v2)), images.source_ids}};
}

}  // namespace solider
