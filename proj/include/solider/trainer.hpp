#pragma once

// Two-phase training: self-distillation pretraining with frozen identity
// controllers, then lambda-conditioned fine-tuning with token-level semantic
// supervision.

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "solider/data.hpp"
#include "solider/semantic.hpp"
#include "solider/ssl.hpp"

namespace solider {

using Real = float;

struct LossWeights {
    double alpha = 0.5;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must be in [0,1]");
    }
};

struct LambdaDistribution {
    enum class Kind { bernoulli, uniform01, beta, fixed };
    Kind kind = Kind::bernoulli;
    double a = 0.5;  // bernoulli p, beta a, fixed value
    double b = 0.0;  // beta b

    static LambdaDistribution bernoulli(double p) { return {Kind::bernoulli, p, 0.0}; }
    static LambdaDistribution uniform01() { return {Kind::uniform01, 0.0, 0.0}; }
    static LambdaDistribution beta(double a, double b) { return {Kind::beta, a, b}; }
    static LambdaDistribution fixed(double v) { return {Kind::fixed, v, 0.0}; }

    void validate() const {
        switch (kind) {
            case Kind::bernoulli:
                if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("lambda distribution: bernoulli p must be in [0,1]");
                break;
            case Kind::beta:
                if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("lambda distribution: beta parameters must be positive");
                break;
            case Kind::fixed:
                if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("lambda must be in [0,1]");
                break;
            case Kind::uniform01: break;
        }
    }

    /// "bernoulli:0.5", "uniform", "beta:0.2,0.2", "fixed:0.3"
    std::string to_string() const {
        std::ostringstream os;
        os.precision(17);
        switch (kind) {
            case Kind::bernoulli: os << "bernoulli:" << a; break;
            case Kind::uniform01: os << "uniform"; break;
            case Kind::beta: os << "beta:" << a << ',' << b; break;
            case Kind::fixed: os << "fixed:" << a; break;
        }
        return os.str();
    }

    static LambdaDistribution parse(const std::string& text) {
        const auto colon = text.find(':');
        const std::string kind = text.substr(0, colon);
        const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
        auto number = [&](const std::string& s) {
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(s, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != s.size()) throw std::invalid_argument("lambda distribution: bad number '" + s + "'");
            return v;
        };
        LambdaDistribution d;
        if (kind == "uniform" && args.empty()) d = uniform01();
        else if (kind == "bernoulli") d = bernoulli(number(args));
        else if (kind == "fixed") d = fixed(number(args));
        else if (kind == "beta") {
            const auto comma = args.find(',');
            if (comma == std::string::npos) throw std::invalid_argument("lambda distribution: beta needs a,b");
            d = beta(number(args.substr(0, comma)), number(args.substr(comma + 1)));
        } else {
            throw std::invalid_argument("lambda distribution: unknown form '" + text + "'");
        }
        d.validate();
        return d;
    }
};

inline ControlValue sample_lambda(const LambdaDistribution& dist, Rng& rng) {
    dist.validate();
    switch (dist.kind) {
        case LambdaDistribution::Kind::bernoulli: return ControlValue(rng.bernoulli(dist.a) ? 1.0 : 0.0);
        case LambdaDistribution::Kind::uniform01: return ControlValue(rng.uniform());
        case LambdaDistribution::Kind::fixed: return ControlValue(dist.a);
        case LambdaDistribution::Kind::beta: {
            const double x = rng.gamma(dist.a), y = rng.gamma(dist.b);
            // Both gamma draws can underflow for tiny shapes; the limit is a
            // point mass at an endpoint with probability a/(a+b).
            if (x + y == 0.0) return ControlValue(rng.bernoulli(dist.a / (dist.a + dist.b)) ? 1.0 : 0.0);
            return ControlValue(std::clamp(x / (x + y), 0.0, 1.0));
        }
    }
    throw std::logic_error("sample_lambda: unhandled distribution");
}

enum class Phase { dino, solider };

inline const char* phase_name(Phase p) { return p == Phase::dino ? "dino" : "solider"; }

/// Phase dino: l_dino. Phase solider: alpha*l_dino + lambda*(1-alpha)*l_sm;
/// at lambda = 0 the semantic term is not part of the graph.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_dino, const Tensor<T>& l_sm, ControlValue lam, const LossWeights& w, Phase phase) {
    if (phase == Phase::dino) return l_dino;
    auto weighted = ops::scale(l_dino, static_cast<T>(w.alpha));
    if (lam.value() == 0.0 || !l_sm.defined()) return weighted;
    return ops::add(weighted, ops::scale(l_sm, static_cast<T>(lam.value() * (1.0 - w.alpha))));
}

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min) {
    if (total == 0) return lr_max;
    const double t = static_cast<double>(step) / static_cast<double>(total);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

/// SGD with momentum and L2 weight decay applied as
/// g = grad + wd * p, buf = mu * buf + g, p -= lr * buf. Parameters without a
/// gradient are left untouched, buffers included. Decay skips 1-D tensors.
template <typename T>
struct Sgd {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::map<std::string, std::vector<T>> buffers;

    void step(ParamSet<T>& params, double lr) {
        for (auto& [name, p] : params.entries()) {
            if (!p.has_grad()) continue;
            auto& data = p.data();
            const auto& grad = p.grad();
            const T wd = p.dim() >= 2 ? static_cast<T>(weight_decay) : T(0);
            auto it = buffers.find(name);
            const bool fresh = it == buffers.end();
            if (fresh) it = buffers.emplace(name, std::vector<T>(data.size(), T(0))).first;
            auto& buf = it->second;
            const T mu = static_cast<T>(momentum), rate = static_cast<T>(lr);
            for (std::size_t i = 0; i < data.size(); ++i) {
                const T g = grad[i] + wd * data[i];
                buf[i] = fresh ? g : mu * buf[i] + g;
                data[i] -= rate * buf[i];
            }
        }
    }
};

struct TrainConfig {
    std::uint64_t seed = 0;
    BackboneConfig backbone;
    ProjectionHeadConfig dino_head;
    SemanticHeadConfig semantic;
    LabelerOptions labeler;
    AugmentConfig augment;
    std::size_t batch_size = 32;
    std::size_t phase1_epochs = 30;
    std::size_t phase2_epochs = 10;
    double lr = 0.2;
    double phase2_lr_ratio = 0.1;
    double lr_min = 1e-6;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double ema_momentum = 0.996;
    double center_momentum = 0.9;
    double temp_student = 0.1;
    double temp_teacher = 0.04;
    LossWeights weights;
    LambdaDistribution lambda_dist = LambdaDistribution::bernoulli(0.5);
    bool masking = true;

    void validate() const {
        backbone.validate();
        augment.validate();
        weights.validate();
        lambda_dist.validate();
        if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
        if (!(lr > 0) || !(lr_min >= 0) || lr_min > lr) throw std::invalid_argument("learning rates must satisfy 0 <= lr_min <= lr");
        if (!(phase2_lr_ratio > 0)) throw std::invalid_argument("phase2_lr_ratio must be positive");
        if (!(ema_momentum >= 0 && ema_momentum < 1)) throw std::invalid_argument("ema_momentum must be in [0,1)");
        if (!(center_momentum >= 0 && center_momentum <= 1)) throw std::invalid_argument("center_momentum must be in [0,1]");
        if (!(temp_student > 0 && temp_teacher > 0)) throw std::invalid_argument("temperatures must be positive");
        if (semantic.parts != labeler.parts) throw std::invalid_argument("semantic head and labeler part counts differ");
    }
};

template <typename T>
struct Model {
    Backbone<T> backbone;
    ProjectionHead<T> dino_head;
    SemanticHead<T> semantic_head;

    Model() = default;
    Model(const TrainConfig& cfg, std::uint64_t seed) : backbone(cfg.backbone, derive_seed(seed, 0xBB)) {
        Rng rng(derive_seed(seed, 0xDD));
        dino_head = ProjectionHead<T>(cfg.backbone.final_dim(), cfg.dino_head, rng);
        Rng srng(derive_seed(seed, 0x5E));
        semantic_head = SemanticHead<T>(cfg.backbone.final_dim(), cfg.semantic, srng);
    }

    /// Parameters of the backbone and projection head; controllers optional.
    void collect_distill(ParamSet<T>& ps, bool with_controllers) const {
        backbone.collect(ps, "backbone");
        if (with_controllers) backbone.collect_controllers(ps, "backbone");
        dino_head.collect(ps, "dino_head");
    }

    void collect_all(ParamSet<T>& ps) const {
        collect_distill(ps, true);
        semantic_head.collect(ps, "semantic_head");
    }
};

/// EMA copy of the student backbone (controllers included) and projection
/// head, plus the running logit center. Never touched by the optimizer.
template <typename T>
struct TeacherState {
    Backbone<T> backbone;
    ProjectionHead<T> dino_head;
    Tensor<T> center;
    double momentum = 0.996;

    void collect(ParamSet<T>& ps) const {
        backbone.collect(ps, "backbone");
        backbone.collect_controllers(ps, "backbone");
        dino_head.collect(ps, "dino_head");
    }
};

struct LossReport {
    std::size_t step = 0;  // global step index
    std::size_t epoch = 0;
    Phase phase = Phase::dino;
    double lambda_used = 0.0;
    double l_dino = 0.0;
    double l_sm = 0.0;
    double total = 0.0;
    double lr = 0.0;
    std::size_t degenerate_count = 0;

    bool operator==(const LossReport&) const = default;
};

/// Mean losses over one epoch.
struct EpochReport {
    Phase phase = Phase::dino;
    std::size_t epoch = 0;
    double l_dino = 0.0, l_sm = 0.0, total = 0.0, mean_lambda = 0.0;
    std::size_t degenerate_count = 0;
    std::uint64_t student_hash = 0;

    bool operator==(const EpochReport&) const = default;
};

inline void write_metrics_header(std::ostream& os) { os << "step,lambda,l_dino,l_sm,total,lr,degenerate_count\n"; }

inline void write_metrics_row(std::ostream& os, const LossReport& r) {
    std::ostringstream line;
    line.precision(9);
    line << r.step << ',' << r.lambda_used << ',' << r.l_dino << ',' << r.l_sm << ',' << r.total << ',' << r.lr << ','
         << r.degenerate_count << '\n';
    os << line.str();
}

struct TrainState {
    TrainConfig cfg;
    Model<Real> student;
    TeacherState<Real> teacher;
    Sgd<Real> optimizer;
    NormStats norm;
    Phase phase = Phase::dino;
    std::size_t epoch = 0;          // within the current phase
    std::size_t step_in_epoch = 0;  // steps done in the current epoch
    std::size_t global_step = 0;
    Rng lambda_rng;
    std::vector<LossReport> steps;
    std::vector<EpochReport> epochs;

    TrainState() = default;
    TrainState(const TrainState&) = delete;
    TrainState& operator=(const TrainState&) = delete;
    TrainState(TrainState&&) = default;
    TrainState& operator=(TrainState&&) = default;

    ParamSet<Real> student_params() const {
        ParamSet<Real> ps;
        student.collect_all(ps);
        return ps;
    }
    ParamSet<Real> teacher_params() const {
        ParamSet<Real> ps;
        teacher.collect(ps);
        return ps;
    }
};

struct TrainingAborted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Fresh student and a value-identical teacher.
inline TrainState init_train_state(const TrainConfig& cfg, const NormStats& norm = {}) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    st.norm = norm;
    st.student = Model<Real>(cfg, cfg.seed);
    st.teacher.backbone = Backbone<Real>(cfg.backbone, derive_seed(cfg.seed, 0xBB));
    Rng rng(derive_seed(cfg.seed, 0xDD));
    st.teacher.dino_head = ProjectionHead<Real>(cfg.backbone.final_dim(), cfg.dino_head, rng);
    ParamSet<Real> tp = st.teacher_params(), sp;
    st.student.collect_distill(sp, true);
    tp.copy_values_from(sp);
    for (auto& [_, t] : tp.entries()) t.set_requires_grad(false);
    st.teacher.center = Tensor<Real>::zeros({cfg.dino_head.prototypes});
    st.teacher.momentum = cfg.ema_momentum;
    st.optimizer.momentum = cfg.momentum;
    st.optimizer.weight_decay = cfg.weight_decay;
    st.lambda_rng = Rng(derive_seed(cfg.seed, 0x1A3B));
    st.phase = Phase::dino;
    st.student.backbone.set_controllers_enabled(false);
    st.teacher.backbone.set_controllers_enabled(false);
    return st;
}

inline std::size_t effective_batch(const TrainConfig& cfg, std::size_t dataset_size) {
    return std::min(cfg.batch_size, dataset_size);
}

/// Drop-last batching; a dataset smaller than one batch forms a single batch.
inline std::size_t steps_per_epoch(const TrainConfig& cfg, std::size_t dataset_size) {
    const std::size_t b = effective_batch(cfg, dataset_size);
    return b == 0 ? 0 : dataset_size / b;
}

inline std::size_t phase_epochs(const TrainConfig& cfg, Phase p) { return p == Phase::dino ? cfg.phase1_epochs : cfg.phase2_epochs; }

inline double phase_lr(const TrainConfig& cfg, Phase p) { return p == Phase::dino ? cfg.lr : cfg.lr * cfg.phase2_lr_ratio; }

/// Image order for one epoch, a function of (seed, phase, epoch) only.
inline std::vector<std::size_t> epoch_order(const TrainConfig& cfg, Phase p, std::size_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, 0xE9, static_cast<std::uint64_t>(p), epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    return order;
}

/// Switches the state to phase 2: controllers attached and counters reset.
inline void begin_finetune(TrainState& st) {
    st.phase = Phase::solider;
    st.epoch = 0;
    st.step_in_epoch = 0;
    st.student.backbone.set_controllers_enabled(true);
    st.teacher.backbone.set_controllers_enabled(true);
}

inline bool phase_complete(const TrainState& st, std::size_t dataset_size) {
    return st.epoch >= phase_epochs(st.cfg, st.phase) || steps_per_epoch(st.cfg, dataset_size) == 0;
}

namespace detail {

inline std::string describe(const LossReport& r) {
    std::ostringstream os;
    os << "non-finite loss at step " << r.step << " (phase " << phase_name(r.phase) << ", epoch " << r.epoch
       << "): l_dino=" << r.l_dino << " l_sm=" << r.l_sm << " lambda=" << r.lambda_used << " lr=" << r.lr;
    return os.str();
}

}  // namespace detail

/// One optimization step on the given images. Order: views, lambda, teacher
/// forward, labels, student forward, losses, backward, SGD, EMA, center.
inline LossReport train_step(TrainState& st, const Dataset& ds, const std::vector<std::size_t>& batch_indices, double lr) {
    const auto& cfg = st.cfg;
    const std::uint64_t step_seed = derive_seed(cfg.seed, 0x57E9, st.global_step);
    const auto images = ds.batch<Real>(batch_indices);
    const auto [v1, v2] = make_views(images, cfg.augment, derive_seed(step_seed, 0xA0));

    LossReport rep;
    rep.step = st.global_step;
    rep.epoch = st.epoch;
    rep.phase = st.phase;
    rep.lr = lr;
    ControlValue lam(0.0);
    if (st.phase == Phase::solider) lam = sample_lambda(cfg.lambda_dist, st.lambda_rng);
    rep.lambda_used = lam.value();
    const bool semantic = st.phase == Phase::solider && lam.value() > 0.0;

    FeatureMap<Real> t_fm1;
    Tensor<Real> t1, t2;
    {
        NoGradGuard guard;
        t_fm1 = st.teacher.backbone.forward(v1, lam);
        t1 = st.teacher.dino_head.forward(global_pool(t_fm1));
        t2 = st.teacher.dino_head.forward(global_pool(st.teacher.backbone.forward(v2, lam)));
    }
    std::vector<SemanticLabelMap> labels;
    if (semantic) {
        labels = pseudo_label(t_fm1, derive_seed(step_seed, 0x1B), cfg.labeler);
        for (const auto& l : labels) rep.degenerate_count += l.degenerate ? 1 : 0;
    }

    // Phase 1 steps neither the controllers nor the semantic head.
    ParamSet<Real> params;
    if (st.phase == Phase::dino) st.student.collect_distill(params, false);
    else st.student.collect_all(params);
    ParamSet<Real> all = st.student_params();
    all.zero_grad();

    const Real ts = static_cast<Real>(cfg.temp_student), tt = static_cast<Real>(cfg.temp_teacher);
    const auto s_fm1 = st.student.backbone.forward(v1, lam);
    const auto s1 = st.student.dino_head.forward(global_pool(s_fm1));
    const auto s2 = st.student.dino_head.forward(global_pool(st.student.backbone.forward(v2, lam)));
    const auto l_dino = ops::scale(ops::add(dino_loss(s1, t2, st.teacher.center, ts, tt), dino_loss(s2, t1, st.teacher.center, ts, tt)),
                                   Real(0.5));
    Tensor<Real> l_sm;
    if (semantic) {
        st.student.semantic_head.training = true;
        auto student_fn = [&](const ImageBatch<Real>& b) { return st.student.backbone.forward(b, lam); };
        l_sm = masked_refeed_loss<Real>(v1, labels, student_fn, st.student.semantic_head, derive_seed(step_seed, 0x3A), cfg.masking,
                                        &s_fm1);
    }
    const auto total = total_loss(l_dino, l_sm, lam, cfg.weights, st.phase);
    rep.l_dino = l_dino.item();
    rep.l_sm = l_sm.defined() ? static_cast<double>(l_sm.item()) : 0.0;
    rep.total = total.item();
    if (!std::isfinite(rep.total) || !std::isfinite(rep.l_dino) || !std::isfinite(rep.l_sm))
        throw TrainingAborted(detail::describe(rep));
    if (st.phase == Phase::solider) {
        const double expect = cfg.weights.alpha * rep.l_dino + lam.value() * (1.0 - cfg.weights.alpha) * rep.l_sm;
        if (std::abs(rep.total - expect) > 1e-6 * std::max(1.0, std::abs(expect)))
            throw std::logic_error("total loss deviates from its weighted sum at step " + std::to_string(rep.step));
    }

    backward(total);
    st.optimizer.step(params, lr);
    {
        ParamSet<Real> tp = st.teacher_params(), sp;
        st.student.collect_distill(sp, true);
        ema_update(tp, sp, static_cast<Real>(st.teacher.momentum));
    }
    st.teacher.center = center_update(st.teacher.center, ops::concat(std::vector<Tensor<Real>>{t1, t2}, 0),
                                      static_cast<Real>(cfg.center_momentum));
    all.zero_grad();
    ++st.global_step;
    return rep;
}

/// Runs the next step of the current phase. Returns false once the phase
/// is complete. Epoch summaries are appended as epochs finish.
inline bool advance(TrainState& st, const Dataset& ds, std::ostream* metrics = nullptr) {
    if (ds.size() == 0) throw std::invalid_argument("training: dataset is empty");
    if (phase_complete(st, ds.size())) return false;
    const std::size_t spe = steps_per_epoch(st.cfg, ds.size());
    const std::size_t b = effective_batch(st.cfg, ds.size());
    const auto order = epoch_order(st.cfg, st.phase, st.epoch, ds.size());
    std::vector<std::size_t> idx(order.begin() + static_cast<long>(st.step_in_epoch * b),
                                 order.begin() + static_cast<long>((st.step_in_epoch + 1) * b));
    const std::size_t total_steps = spe * phase_epochs(st.cfg, st.phase);
    const double lr = cosine_lr(st.epoch * spe + st.step_in_epoch, total_steps, phase_lr(st.cfg, st.phase), st.cfg.lr_min);
    auto rep = train_step(st, ds, idx, lr);
    st.steps.push_back(rep);
    if (metrics) write_metrics_row(*metrics, rep);
    if (++st.step_in_epoch == spe) {
        EpochReport er;
        er.phase = st.phase;
        er.epoch = st.epoch;
        const std::size_t first = st.steps.size() - spe;
        for (std::size_t i = first; i < st.steps.size(); ++i) {
            er.l_dino += st.steps[i].l_dino / static_cast<double>(spe);
            er.l_sm += st.steps[i].l_sm / static_cast<double>(spe);
            er.total += st.steps[i].total / static_cast<double>(spe);
            er.mean_lambda += st.steps[i].lambda_used / static_cast<double>(spe);
            er.degenerate_count += st.steps[i].degenerate_count;
        }
        er.student_hash = st.student_params().hash();
        st.epochs.push_back(er);
        st.step_in_epoch = 0;
        ++st.epoch;
    }
    return true;
}

/// Runs at most n steps of the current phase; returns the reports produced.
inline std::vector<LossReport> run_steps(TrainState& st, const Dataset& ds, std::size_t n, std::ostream* metrics = nullptr) {
    std::vector<LossReport> out;
    for (std::size_t i = 0; i < n && advance(st, ds, metrics); ++i) out.push_back(st.steps.back());
    return out;
}

/// Optional per-epoch progress sink.
using EpochCallback = std::function<void(const TrainState&, const EpochReport&)>;

inline void run_phase(TrainState& st, const Dataset& ds, std::ostream* metrics, const EpochCallback& on_epoch) {
    std::size_t seen = st.epochs.size();
    while (advance(st, ds, metrics))
        if (on_epoch && st.epochs.size() != seen) {
            seen = st.epochs.size();
            on_epoch(st, st.epochs.back());
        }
}

inline TrainState pretrain_dino(const TrainConfig& cfg, const Dataset& ds, std::ostream* metrics = nullptr,
                                const EpochCallback& on_epoch = {}) {
    if (ds.size() == 0) throw std::invalid_argument("pretrain: dataset is empty");
    TrainState st = init_train_state(cfg, ds.norm);
    if (metrics) write_metrics_header(*metrics);
    run_phase(st, ds, metrics, on_epoch);
    return st;
}

/// Continues a phase-1 state (or resumes a partially finished phase 2).
inline TrainState finetune_solider(TrainState st, const Dataset& ds, std::ostream* metrics = nullptr,
                                   const EpochCallback& on_epoch = {}) {
    if (ds.size() == 0) throw std::invalid_argument("finetune: dataset is empty");
    if (st.phase == Phase::dino) {
        if (!phase_complete(st, ds.size())) throw std::invalid_argument("finetune: phase-1 training has not finished");
        begin_finetune(st);
    }
    if (metrics) write_metrics_header(*metrics);
    run_phase(st, ds, metrics, on_epoch);
    return st;
}

}  // namespace solider
