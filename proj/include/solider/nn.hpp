#pragma once

// Parameter containers and the small layers shared by every model.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "solider/ops.hpp"
#include "solider/rng.hpp"

namespace solider {

struct StructureMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Ordered, named references to parameter tensors. Entries alias the model's
/// tensors, so writes through a ParamSet update the model.
template <typename T>
class ParamSet {
public:
    void add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
    std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw StructureMismatch("no parameter named " + name);
        return entries_[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const { return const_cast<ParamSet*>(this)->at(name); }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    /// Copies values from src by name; every name here must exist in src with
    /// the same shape.
    void copy_values_from(const ParamSet& src) {
        for (auto& [name, t] : entries_) {
            const Tensor<T>& s = src.at(name);
            if (s.shape() != t.shape())
                throw StructureMismatch("parameter " + name + ": shape " + shape_str(t.shape()) + " vs " + shape_str(s.shape()));
        }
        for (auto& [name, t] : entries_) t.data() = src.at(name).data();
    }

    /// FNV-1a over names, shapes and raw value bytes.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto feed = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
        };
        for (const auto& [name, t] : entries_) {
            feed(name.data(), name.size());
            for (auto d : t.shape()) feed(&d, sizeof d);
            feed(t.data().data(), t.numel() * sizeof(T));
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace init {

/// Normal(0, std) truncated to two standard deviations.
template <typename T>
std::vector<T> trunc_normal(std::size_t n, double stddev, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) {
        double s;
        do s = rng.normal(); while (std::abs(s) > 2.0);
        x = static_cast<T>(s * stddev);
    }
    return v;
}

template <typename T>
std::vector<T> uniform(std::size_t n, double bound, Rng& rng) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return v;
}

}  // namespace init

template <typename T>
struct Linear {
    Tensor<T> weight;  // (in, out)
    Tensor<T> bias;    // (out), undefined when bias is disabled

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double stddev = 0.02)
        : weight({in, out}, init::trunc_normal<T>(in * out, stddev, rng), true) {
        if (with_bias) bias = Tensor<T>::zeros({out}, true);
    }

    std::size_t in_features() const { return weight.size(0); }
    std::size_t out_features() const { return weight.size(1); }

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.shape().back() != in_features())
            throw ShapeError("linear: input " + shape_str(x.shape()) + " but layer expects width " + std::to_string(in_features()));
        auto y = ops::matmul(x, weight);
        return bias.defined() ? ops::add(y, bias) : y;
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".weight", weight);
        if (bias.defined()) ps.add(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t d) : gamma(Tensor<T>::full({d}, T(1), true)), beta(Tensor<T>::zeros({d}, true)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".gamma", gamma);
        ps.add(prefix + ".beta", beta);
    }
};

}  // namespace solider
