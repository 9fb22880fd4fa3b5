#pragma once

// Gradient-check cases shared by the unit suite and the acceptance runner.
// Each case draws a fresh random point and returns the scalar function and
// the point at which to compare tape gradients with central differences.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "solider/backbone.hpp"
#include "solider/gradcheck.hpp"
#include "solider/semantic.hpp"
#include "solider/ssl.hpp"

namespace solider::testing {

using Td = Tensor<double>;
using Fn = std::function<Td(const Td&)>;

struct GradPoint {
    Fn f;
    Td x;
};

struct GradCase {
    std::string name;
    bool composite;
    std::function<GradPoint(Rng&)> make;
};

inline Td rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td(std::move(s), std::move(v));
}

/// Away from zero by at least `gap`, for kinks.
inline Td rand_tensor_gapped(Shape s, Rng& rng, double gap = 0.05) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) {
        const double m = rng.uniform(gap, 1.0);
        x = rng.bernoulli(0.5) ? m : -m;
    }
    return Td(std::move(s), std::move(v));
}

/// sum(out * R) for a fixed random R, so every output coordinate matters.
inline Td project(const Td& out, const Td& r) { return ops::sum(ops::mul(out, r)); }

inline Fn projected(std::function<Td(const Td&)> g, Td r) {
    return [g = std::move(g), r = std::move(r)](const Td& x) { return project(g(x), r); };
}

inline std::vector<int> rand_labels(std::size_t n, int classes, Rng& rng) {
    std::vector<int> v(n);
    for (auto& l : v) l = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
    return v;
}

inline std::vector<GradCase> primitive_cases() {
    std::vector<GradCase> cs;
    auto unary = [&](std::string name, Shape s, std::function<Td(const Td&)> g, bool gapped = false) {
        cs.push_back({name, false, [s, g, gapped](Rng& rng) {
                          Td x = gapped ? rand_tensor_gapped(s, rng) : rand_tensor(s, rng, -2.0, 2.0);
                          Td probe = g(x);
                          return GradPoint{projected(g, rand_tensor(probe.shape(), rng)), x};
                      }});
    };
    cs.push_back({"add", false, [](Rng& rng) {
                      Td b = rand_tensor({4}, rng), r = rand_tensor({3, 4}, rng);
                      return GradPoint{[b, r](const Td& x) { return project(ops::add(x, b), r); }, rand_tensor({3, 4}, rng)};
                  }});
    cs.push_back({"add_broadcast_operand", false, [](Rng& rng) {
                      Td a = rand_tensor({3, 4}, rng), r = rand_tensor({3, 4}, rng);
                      return GradPoint{[a, r](const Td& x) { return project(ops::add(a, x), r); }, rand_tensor({4}, rng)};
                  }});
    cs.push_back({"sub", false, [](Rng& rng) {
                      Td a = rand_tensor({2, 3}, rng), r = rand_tensor({2, 3}, rng);
                      return GradPoint{[a, r](const Td& x) { return project(ops::sub(a, x), r); }, rand_tensor({2, 3}, rng)};
                  }});
    cs.push_back({"mul", false, [](Rng& rng) {
                      Td b = rand_tensor({2, 3}, rng), r = rand_tensor({2, 3}, rng);
                      return GradPoint{[b, r](const Td& x) { return project(ops::mul(x, ops::add(x, b)), r); }, rand_tensor({2, 3}, rng)};
                  }});
    cs.push_back({"mul_broadcast_operand", false, [](Rng& rng) {
                      Td a = rand_tensor({2, 2, 3}, rng), r = rand_tensor({2, 2, 3}, rng);
                      return GradPoint{[a, r](const Td& x) { return project(ops::mul(a, x), r); }, rand_tensor({3}, rng)};
                  }});
    unary("scale", {5}, [](const Td& x) { return ops::scale(x, 2.5); });
    cs.push_back({"matmul_left", false, [](Rng& rng) {
                      Td b = rand_tensor({4, 2}, rng), r = rand_tensor({3, 2}, rng);
                      return GradPoint{[b, r](const Td& x) { return project(ops::matmul(x, b), r); }, rand_tensor({3, 4}, rng)};
                  }});
    cs.push_back({"matmul_right_batched", false, [](Rng& rng) {
                      Td a = rand_tensor({2, 3, 4}, rng), r = rand_tensor({2, 3, 2}, rng);
                      return GradPoint{[a, r](const Td& x) { return project(ops::matmul(a, x), r); }, rand_tensor({2, 4, 2}, rng)};
                  }});
    cs.push_back({"matmul_shared_rhs", false, [](Rng& rng) {
                      Td a = rand_tensor({2, 3, 4}, rng), r = rand_tensor({2, 3, 2}, rng);
                      return GradPoint{[a, r](const Td& x) { return project(ops::matmul(a, x), r); }, rand_tensor({4, 2}, rng)};
                  }});
    unary("transpose", {2, 3, 4}, [](const Td& x) { return ops::permute(x, {2, 0, 1}); });
    unary("reshape", {2, 6}, [](const Td& x) { return ops::reshape(x, {3, 4}); });
    cs.push_back({"concat", false, [](Rng& rng) {
                      Td other = rand_tensor({2, 2}, rng), r = rand_tensor({2, 5}, rng);
                      return GradPoint{[other, r](const Td& x) { return project(ops::concat(std::vector<Td>{other, x}, 1), r); },
                                       rand_tensor({2, 3}, rng)};
                  }});
    unary("slice", {4, 3}, [](const Td& x) { return ops::slice(x, 0, 1, 2); });
    unary("softmax", {3, 5}, [](const Td& x) { return ops::softmax(x, -1); });
    unary("softmax_axis0", {3, 5}, [](const Td& x) { return ops::softmax(x, 0); });
    unary("log_softmax", {3, 5}, [](const Td& x) { return ops::log_softmax(x, -1); });
    cs.push_back({"layer_norm", false, [](Rng& rng) {
                      Td g = rand_tensor({5}, rng, 0.5, 1.5), b = rand_tensor({5}, rng), r = rand_tensor({3, 5}, rng);
                      return GradPoint{[g, b, r](const Td& x) { return project(ops::layer_norm(x, g, b), r); }, rand_tensor({3, 5}, rng)};
                  }});
    cs.push_back({"layer_norm_gamma", false, [](Rng& rng) {
                      Td in = rand_tensor({3, 5}, rng), b = rand_tensor({5}, rng), r = rand_tensor({3, 5}, rng);
                      return GradPoint{[in, b, r](const Td& g) { return project(ops::layer_norm(in, g, b), r); },
                                       rand_tensor({5}, rng, 0.5, 1.5)};
                  }});
    unary("relu", {8}, [](const Td& x) { return ops::relu(x); }, true);
    unary("gelu", {8}, [](const Td& x) { return ops::gelu(x); });
    unary("softplus", {8}, [](const Td& x) { return ops::softplus(x); });
    unary("l2_norm", {3, 4}, [](const Td& x) { return ops::l2_normalize(x, -1); });
    unary("mean", {3, 4}, [](const Td& x) { return ops::mul(ops::mean(x), ops::mean(x)); });
    unary("mean_axis", {3, 4}, [](const Td& x) { return ops::mean(x, 0); });
    unary("sum", {3, 4}, [](const Td& x) { return ops::mul(ops::sum(x), ops::sum(x)); });
    unary("sum_axis", {2, 3, 4}, [](const Td& x) { return ops::sum(x, 1); });
    unary("broadcast", {4}, [](const Td& x) { return ops::broadcast_to(x, {3, 4}); });
    unary("embedding", {5, 3}, [](const Td& x) { return ops::embedding(x, {4, 0, 4, 2}); });
    cs.push_back({"batch_norm_train", false, [](Rng& rng) {
                      Td g = rand_tensor({3}, rng, 0.5, 1.5), b = rand_tensor({3}, rng), r = rand_tensor({6, 3}, rng);
                      auto stats = std::make_shared<ops::BatchNormStats<double>>(3);
                      return GradPoint{[g, b, r, stats](const Td& x) { return project(ops::batch_norm(x, g, b, *stats, true), r); },
                                       rand_tensor({6, 3}, rng)};
                  }});
    cs.push_back({"batch_norm_eval", false, [](Rng& rng) {
                      Td g = rand_tensor({3}, rng, 0.5, 1.5), b = rand_tensor({3}, rng), r = rand_tensor({6, 3}, rng);
                      auto stats = std::make_shared<ops::BatchNormStats<double>>(3);
                      stats->running_mean = {0.1, -0.2, 0.3};
                      stats->running_var = {0.5, 1.5, 2.0};
                      return GradPoint{[g, b, r, stats](const Td& x) { return project(ops::batch_norm(x, g, b, *stats, false), r); },
                                       rand_tensor({6, 3}, rng)};
                  }});
    cs.push_back({"cross_entropy_soft", false, [](Rng& rng) {
                      Td t = ops::softmax(rand_tensor({3, 5}, rng, -2.0, 2.0), -1);
                      return GradPoint{[t](const Td& x) { return ops::cross_entropy_soft(x, t); }, rand_tensor({3, 5}, rng, -2.0, 2.0)};
                  }});
    cs.push_back({"cross_entropy_hard", false, [](Rng& rng) {
                      auto labels = rand_labels(4, 5, rng);
                      return GradPoint{[labels](const Td& x) { return ops::cross_entropy_hard(x, labels); },
                                       rand_tensor({4, 5}, rng, -2.0, 2.0)};
                  }});
    return cs;
}

inline BackboneConfig tiny_backbone_config() {
    BackboneConfig c;
    c.image_h = 8;
    c.image_w = 8;
    c.patch_size = 2;
    c.embed_dim = 4;
    c.depths = {1, 1};
    c.heads = {1, 2};
    c.window_size = 2;
    c.mlp_ratio = 2;
    c.controller_hidden = 3;
    return c;
}

/// Pushes controller parameters away from identity so the modulation path is
/// exercised by the check.
template <typename T>
void perturb_controller(Controller<T>& ctl, Rng& rng, double scale = 0.3) {
    for (auto& v : ctl.encode_out.weight.data()) v = static_cast<T>(rng.uniform(-scale, scale));
    for (auto& v : ctl.encode_out.bias.data()) v += static_cast<T>(rng.uniform(-scale, scale));
}

inline std::vector<GradCase> composite_cases() {
    std::vector<GradCase> cs;
    cs.push_back({"backbone_block", true, [](Rng& rng) {
                      auto block = std::make_shared<TransformerBlock<double>>(8, 2, 2, 0, 2, rng);
                      for (auto* l : {&block->qkv, &block->proj, &block->fc1, &block->fc2})
                          for (auto& v : l->weight.data()) v = rng.uniform(-0.4, 0.4);
                      Td r = rand_tensor({1, 4, 4, 8}, rng);
                      return GradPoint{[block, r](const Td& x) { return project(block->forward(x), r); }, rand_tensor({1, 4, 4, 8}, rng)};
                  }});
    cs.push_back({"backbone_block_shifted", true, [](Rng& rng) {
                      auto block = std::make_shared<TransformerBlock<double>>(4, 2, 2, 1, 2, rng);
                      for (auto* l : {&block->qkv, &block->proj, &block->fc1, &block->fc2})
                          for (auto& v : l->weight.data()) v = rng.uniform(-0.4, 0.4);
                      Td r = rand_tensor({2, 4, 4, 4}, rng);
                      return GradPoint{[block, r](const Td& x) { return project(block->forward(x), r); }, rand_tensor({2, 4, 4, 4}, rng)};
                  }});
    cs.push_back({"full_backbone", true, [](Rng& rng) {
                      auto bb = std::make_shared<Backbone<double>>(tiny_backbone_config(), rng.next_u64());
                      for (std::size_t i = 0; i < bb->block_count(); ++i) perturb_controller(bb->controller(i), rng);
                      const double lam = rng.uniform();
                      Td r = rand_tensor({1, 2, 2, 8}, rng);
                      return GradPoint{[bb, r, lam](const Td& x) {
                                           return project(bb->forward(ImageBatch<double>{x, {0}}, ControlValue(lam)).tokens, r);
                                       },
                                       rand_tensor({1, 3, 8, 8}, rng)};
                  }});
    cs.push_back({"controller_features", true, [](Rng& rng) {
                      auto ctl = std::make_shared<Controller<double>>(controller_init<double>(4, 5, rng.next_u64()));
                      perturb_controller(*ctl, rng);
                      const double lam = rng.uniform();
                      Td r = rand_tensor({2, 2, 2, 4}, rng);
                      return GradPoint{[ctl, r, lam](const Td& x) { return project(ctl->forward(x, ControlValue(lam)), r); },
                                       rand_tensor({2, 2, 2, 4}, rng)};
                  }});
    cs.push_back({"controller_encoder", true, [](Rng& rng) {
                      auto ctl = std::make_shared<Controller<double>>(controller_init<double>(4, 5, rng.next_u64()));
                      perturb_controller(*ctl, rng);
                      const double lam = rng.uniform();
                      Td fm = rand_tensor({2, 2, 2, 4}, rng), r = rand_tensor({2, 2, 2, 4}, rng);
                      Td w0 = ctl->encode_out.weight.detach();
                      return GradPoint{[ctl, fm, r, lam](const Td& w) {
                                           Controller<double> c = *ctl;
                                           c.encode_out.weight = w;
                                           return project(c.forward(fm, ControlValue(lam)), r);
                                       },
                                       w0};
                  }});
    cs.push_back({"semantic_head", true, [](Rng& rng) {
                      SemanticHeadConfig hc;
                      hc.blocks = 2;
                      hc.hidden = 5;
                      hc.parts = 3;
                      auto head = std::make_shared<SemanticHead<double>>(4, hc, rng);
                      auto labels = rand_labels(8, 4, rng);
                      return GradPoint{[head, labels](const Td& x) { return ops::cross_entropy_hard(head->forward_rows(x), labels); },
                                       rand_tensor({8, 4}, rng)};
                  }});
    cs.push_back({"dino_loss", true, [](Rng& rng) {
                      Td t = rand_tensor({3, 6}, rng), c = rand_tensor({6}, rng, -0.2, 0.2);
                      return GradPoint{[t, c](const Td& x) { return dino_loss(x, t, c, 0.1, 0.04); }, rand_tensor({3, 6}, rng)};
                  }});
    cs.push_back({"dino_head_loss", true, [](Rng& rng) {
                      ProjectionHeadConfig pc;
                      pc.hidden = 6;
                      pc.prototypes = 5;
                      auto head = std::make_shared<ProjectionHead<double>>(4, pc, rng);
                      for (auto* l : {&head->fc1, &head->fc2})
                          for (auto& v : l->weight.data()) v = rng.uniform(-0.5, 0.5);
                      for (auto& v : head->prototypes.data()) v = rng.uniform(-1.0, 1.0);
                      Td t = rand_tensor({2, 5}, rng), c = Td::zeros({5});
                      return GradPoint{[head, t, c](const Td& x) { return dino_loss(head->forward(x), t, c, 0.1, 0.04); },
                                       rand_tensor({2, 4}, rng)};
                  }});
    cs.push_back({"semantic_loss", true, [](Rng& rng) {
                      SemanticHeadConfig hc;
                      hc.blocks = 1;
                      hc.hidden = 6;
                      hc.parts = 3;
                      auto head = std::make_shared<SemanticHead<double>>(4, hc, rng);
                      std::vector<SemanticLabelMap> maps(2);
                      for (auto& m : maps) {
                          m.height = 3;
                          m.width = 2;
                          m.part_count = 3;
                          m.labels = rand_labels(6, 4, rng);
                      }
                      return GradPoint{[head, maps](const Td& x) {
                                           FeatureMap<double> fm{x, 0, std::nullopt};
                                           return semantic_loss(semantic_head_forward(fm, *head), maps);
                                       },
                                       rand_tensor({2, 3, 2, 4}, rng)};
                  }});
    return cs;
}

struct GradCaseResult {
    std::string name;
    bool composite = false;
    double worst = 0.0;
    std::size_t points = 0;
};

/// Worst relative error of each case over `points` random draws.
inline std::vector<GradCaseResult> run_grad_cases(const std::vector<GradCase>& cases, std::uint64_t seed, std::size_t points = 10,
                                                  double eps = 1e-6) {
    std::vector<GradCaseResult> out;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        GradCaseResult r{cases[c].name, cases[c].composite, 0.0, points};
        for (std::size_t p = 0; p < points; ++p) {
            Rng rng(derive_seed(seed, c, p));
            auto gp = cases[c].make(rng);
            r.worst = std::max(r.worst, finite_diff_check<double>(gp.f, gp.x, eps));
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace solider::testing
