#pragma once

// Micro windowed-attention transformer. Token features are kept
// channels-last, (n, h, w, c); FeatureMap::to_nchw() gives the (n, c, h, w)
// layout used for export.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "solider/controller.hpp"
#include "solider/nn.hpp"

namespace solider {

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t image_h = 64;
    std::size_t image_w = 32;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 32;
    std::vector<std::size_t> depths{2, 2};
    std::vector<std::size_t> heads{2, 4};
    std::size_t window_size = 4;
    std::size_t mlp_ratio = 4;
    bool shifted_windows = false;
    std::size_t controller_hidden = 16;

    std::size_t stages() const { return depths.size(); }
    std::size_t stage_dim(std::size_t s) const { return embed_dim << s; }
    std::size_t final_dim() const { return stage_dim(stages() - 1); }
    std::size_t total_downsample() const { return patch_size << (stages() - 1); }
    std::size_t grid_h(std::size_t s) const { return image_h / (patch_size << s); }
    std::size_t grid_w(std::size_t s) const { return image_w / (patch_size << s); }

    void validate() const {
        if (depths.empty() || depths.size() != heads.size())
            throw std::invalid_argument("backbone: depths and heads must be non-empty and of equal length");
        if (patch_size == 0 || window_size == 0 || embed_dim == 0) throw std::invalid_argument("backbone: zero size in config");
        const std::size_t unit = patch_size * window_size;
        if (image_h % unit || image_w % unit)
            throw std::invalid_argument("backbone: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                        " is not a multiple of patch*window = " + std::to_string(unit));
        for (std::size_t s = 0; s < stages(); ++s) {
            if (stage_dim(s) % heads[s])
                throw std::invalid_argument("backbone: stage " + std::to_string(s) + " dim " + std::to_string(stage_dim(s)) +
                                            " not divisible by " + std::to_string(heads[s]) + " heads");
            if ((image_h % (patch_size << s)) || (image_w % (patch_size << s)) || grid_h(s) % window_size ||
                grid_w(s) % window_size)
                throw std::invalid_argument("backbone: window " + std::to_string(window_size) + " does not tile stage " +
                                            std::to_string(s) + " grid");
        }
    }
};

template <typename T>
struct FeatureMap {
    Tensor<T> tokens;  // (n, h, w, c)
    std::size_t stage = 0;
    std::optional<double> lambda_used;

    std::size_t batch() const { return tokens.size(0); }
    std::size_t height() const { return tokens.size(1); }
    std::size_t width() const { return tokens.size(2); }
    std::size_t channels() const { return tokens.size(3); }

    Tensor<T> to_nchw() const { return ops::permute(tokens, {0, 3, 1, 2}); }
};

/// (n, C, H, W) normalized pixels.
template <typename T>
struct ImageBatch {
    Tensor<T> pixels;
    std::vector<std::size_t> source_ids;

    std::size_t size() const { return pixels.size(0); }
};

namespace detail {

/// Cyclic roll of a channels-last map by -shift along rows and columns.
template <typename T>
Tensor<T> roll_hw(const Tensor<T>& x, std::size_t shift_h, std::size_t shift_w) {
    Tensor<T> y = x;
    if (shift_h) {
        const std::size_t h = x.size(1);
        y = ops::concat(std::vector<Tensor<T>>{ops::slice(y, 1, shift_h, h - shift_h), ops::slice(y, 1, 0, shift_h)}, 1);
    }
    if (shift_w) {
        const std::size_t w = x.size(2);
        y = ops::concat(std::vector<Tensor<T>>{ops::slice(y, 2, shift_w, w - shift_w), ops::slice(y, 2, 0, shift_w)}, 2);
    }
    return y;
}

}  // namespace detail

/// (n, h, w, c) -> (n * windows, ws*ws, c)
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t ws) {
    const std::size_t n = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
    if (h % ws || w % ws)
        throw ShapeError("window partition: window " + std::to_string(ws) + " does not divide grid " + std::to_string(h) + "x" +
                         std::to_string(w));
    auto y = ops::reshape(x, {n, h / ws, ws, w / ws, ws, c});
    y = ops::permute(y, {0, 1, 3, 2, 4, 5});
    return ops::reshape(y, {n * (h / ws) * (w / ws), ws * ws, c});
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& win, std::size_t ws, std::size_t n, std::size_t h, std::size_t w) {
    const std::size_t c = win.shape().back();
    auto y = ops::reshape(win, {n, h / ws, w / ws, ws, ws, c});
    y = ops::permute(y, {0, 1, 3, 2, 4, 5});
    return ops::reshape(y, {n, h, w, c});
}

template <typename T>
struct TransformerBlock {
    LayerNorm<T> norm1, norm2;
    Linear<T> qkv, proj, fc1, fc2;
    std::size_t dim = 0, heads = 1, window = 4, shift = 0;

    TransformerBlock() = default;
    TransformerBlock(std::size_t d, std::size_t n_heads, std::size_t ws, std::size_t shift_size, std::size_t mlp_ratio,
                     Rng& rng)
        : norm1(d),
          norm2(d),
          qkv(d, 3 * d, rng),
          proj(d, d, rng),
          fc1(d, d * mlp_ratio, rng),
          fc2(d * mlp_ratio, d, rng),
          dim(d),
          heads(n_heads),
          window(ws),
          shift(shift_size) {}

    /// Zeroes the residual-branch outputs so the block is the identity map.
    void zero_residual_outputs() {
        for (auto* l : {&proj, &fc2}) {
            std::fill(l->weight.data().begin(), l->weight.data().end(), T(0));
            std::fill(l->bias.data().begin(), l->bias.data().end(), T(0));
        }
    }

    Tensor<T> attention(const Tensor<T>& x) const {
        const std::size_t n = x.size(0), h = x.size(1), w = x.size(2);
        const std::size_t hd = dim / heads;
        auto shifted = shift ? detail::roll_hw(x, shift, shift) : x;
        auto win = window_partition(shifted, window);
        const std::size_t bw = win.size(0), t = win.size(1);
        auto q_k_v = ops::reshape(qkv(win), {bw, t, 3, heads, hd});
        q_k_v = ops::permute(q_k_v, {2, 0, 3, 1, 4});  // (3, bw, heads, t, hd)
        auto q = ops::reshape(ops::slice(q_k_v, 0, 0, 1), {bw * heads, t, hd});
        auto k = ops::reshape(ops::slice(q_k_v, 0, 1, 1), {bw * heads, t, hd});
        auto v = ops::reshape(ops::slice(q_k_v, 0, 2, 1), {bw * heads, t, hd});
        auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), static_cast<T>(1.0 / std::sqrt(double(hd))));
        auto attn = ops::softmax(scores, -1);
        auto out = ops::reshape(ops::matmul(attn, v), {bw, heads, t, hd});
        out = ops::reshape(ops::permute(out, {0, 2, 1, 3}), {bw, t, dim});
        auto merged = window_reverse(proj(out), window, n, h, w);
        if (shift) merged = detail::roll_hw(merged, h - shift, w - shift);
        return merged;
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.shape().back() != dim) throw ShapeError("block: input " + shape_str(x.shape()) + " vs dim " + std::to_string(dim));
        auto y = ops::add(x, attention(norm1(x)));
        return ops::add(y, fc2(ops::gelu(fc1(norm2(y)))));
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        norm1.collect(ps, prefix + ".norm1");
        qkv.collect(ps, prefix + ".attn.qkv");
        proj.collect(ps, prefix + ".attn.proj");
        norm2.collect(ps, prefix + ".norm2");
        fc1.collect(ps, prefix + ".mlp.fc1");
        fc2.collect(ps, prefix + ".mlp.fc2");
    }
};

/// 2x2 neighbourhood concat -> layer norm -> linear 4c -> 2c.
template <typename T>
struct PatchMerging {
    LayerNorm<T> norm;
    Linear<T> reduce;

    PatchMerging() = default;
    PatchMerging(std::size_t c, Rng& rng) : norm(4 * c), reduce(4 * c, 2 * c, rng, false) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        const std::size_t n = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
        auto y = ops::reshape(x, {n, h / 2, 2, w / 2, 2, c});
        y = ops::reshape(ops::permute(y, {0, 1, 3, 2, 4, 5}), {n, h / 2, w / 2, 4 * c});
        return reduce(norm(y));
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        norm.collect(ps, prefix + ".norm");
        reduce.collect(ps, prefix + ".reduction");
    }
};

template <typename T>
struct PatchEmbed {
    Linear<T> proj;
    Tensor<T> pos;  // (h, w, c0)
    LayerNorm<T> norm;
    std::size_t patch = 4;

    PatchEmbed() = default;
    PatchEmbed(const BackboneConfig& cfg, Rng& rng)
        : proj(cfg.in_channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng),
          pos({cfg.grid_h(0), cfg.grid_w(0), cfg.embed_dim},
              init::trunc_normal<T>(cfg.grid_h(0) * cfg.grid_w(0) * cfg.embed_dim, 0.02, rng), true),
          norm(cfg.embed_dim),
          patch(cfg.patch_size) {}

    /// images (n, C, H, W) -> tokens (n, H/p, W/p, c0)
    Tensor<T> forward(const Tensor<T>& images) const {
        if (images.dim() != 4)
            throw ShapeError("patch_embed: expected (n, C, H, W), got " + shape_str(images.shape()));
        const std::size_t n = images.size(0), C = images.size(1), H = images.size(2), W = images.size(3);
        const std::size_t p = patch;
        if (H % p || W % p || C * p * p != proj.in_features() || H / p != pos.size(0) || W / p != pos.size(1))
            throw ShapeError("patch_embed: image batch " + shape_str(images.shape()) + " does not match the configured stem");
        auto x = ops::reshape(images, {n, C, H / p, p, W / p, p});
        x = ops::reshape(ops::permute(x, {0, 2, 4, 1, 3, 5}), {n, H / p, W / p, C * p * p});
        return norm(ops::add(proj(x), pos));
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        proj.collect(ps, prefix + ".proj");
        ps.add(prefix + ".pos", pos);
        norm.collect(ps, prefix + ".norm");
    }
};

template <typename T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        embed_ = PatchEmbed<T>(cfg_, rng);
        for (std::size_t s = 0; s < cfg_.stages(); ++s) {
            const std::size_t d = cfg_.stage_dim(s);
            for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
                const std::size_t shift = (cfg_.shifted_windows && b % 2 == 1) ? cfg_.window_size / 2 : 0;
                blocks_.emplace_back(d, cfg_.heads[s], cfg_.window_size, shift, cfg_.mlp_ratio, rng);
                block_stage_.push_back(s);
                controllers_.push_back(controller_init<T>(d, cfg_.controller_hidden, rng.next_u64()));
            }
            if (s + 1 < cfg_.stages()) merges_.emplace_back(d, rng);
        }
    }

    const BackboneConfig& config() const { return cfg_; }
    std::size_t block_count() const { return blocks_.size(); }
    TransformerBlock<T>& block(std::size_t i) { return blocks_.at(i); }
    Controller<T>& controller(std::size_t i) { return controllers_.at(i); }
    const Controller<T>& controller(std::size_t i) const { return controllers_.at(i); }

    /// When false, blocks pass their output through unmodulated.
    void set_controllers_enabled(bool on) { controllers_enabled_ = on; }
    bool controllers_enabled() const { return controllers_enabled_; }

    FeatureMap<T> patch_embed(const ImageBatch<T>& images) const { return {embed_.forward(images.pixels), 0, std::nullopt}; }

    /// One block plus, when attached, its controller applied after the residual sum.
    FeatureMap<T> block_forward(const FeatureMap<T>& fm, std::size_t index, ControlValue lam) const {
        auto out = blocks_.at(index).forward(fm.tokens);
        if (controllers_enabled_) out = controllers_[index].forward(out, lam);
        return {out, block_stage_[index], lam.value()};
    }

    FeatureMap<T> forward(const ImageBatch<T>& images, ControlValue lam) const {
        FeatureMap<T> fm = patch_embed(images);
        std::size_t merge = 0;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i > 0 && block_stage_[i] != block_stage_[i - 1]) fm.tokens = merges_[merge++].forward(fm.tokens);
            fm = block_forward(fm, i, lam);
        }
        fm.lambda_used = lam.value();
        return fm;
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        embed_.collect(ps, prefix + ".patch_embed");
        std::size_t merge = 0;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i > 0 && block_stage_[i] != block_stage_[i - 1]) {
                merges_[merge].collect(ps, prefix + ".merge" + std::to_string(merge));
                ++merge;
            }
            blocks_[i].collect(ps, prefix + ".block" + std::to_string(i));
        }
    }

    /// Controller parameters are registered separately so they can be frozen.
    void collect_controllers(ParamSet<T>& ps, const std::string& prefix) const {
        for (std::size_t i = 0; i < controllers_.size(); ++i) controllers_[i].collect(ps, prefix + ".controller" + std::to_string(i));
    }

private:
    BackboneConfig cfg_;
    PatchEmbed<T> embed_;
    std::vector<TransformerBlock<T>> blocks_;
    std::vector<std::size_t> block_stage_;
    std::vector<PatchMerging<T>> merges_;
    std::vector<Controller<T>> controllers_;
    bool controllers_enabled_ = true;
};

}  // namespace solider
