#pragma once

// Name-based dispatch over the primitive catalog, for generic drivers such
// as the gradient checker and tests that sweep every primitive.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "solider/ops.hpp"

namespace solider {

using AttrValue = std::variant<double, std::int64_t, std::vector<std::int64_t>>;
using Attrs = std::map<std::string, AttrValue>;

namespace detail {

inline double attr_f(const Attrs& a, const std::string& key, double fallback) {
    auto it = a.find(key);
    if (it == a.end()) return fallback;
    if (auto* d = std::get_if<double>(&it->second)) return *d;
    if (auto* i = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*i);
    throw std::invalid_argument("attribute '" + key + "' must be numeric");
}

inline std::int64_t attr_i(const Attrs& a, const std::string& key, std::int64_t fallback) {
    auto it = a.find(key);
    if (it == a.end()) return fallback;
    if (auto* i = std::get_if<std::int64_t>(&it->second)) return *i;
    throw std::invalid_argument("attribute '" + key + "' must be an integer");
}

inline std::vector<std::int64_t> attr_v(const Attrs& a, const std::string& key) {
    auto it = a.find(key);
    if (it == a.end()) throw std::invalid_argument("missing attribute '" + key + "'");
    if (auto* v = std::get_if<std::vector<std::int64_t>>(&it->second)) return *v;
    throw std::invalid_argument("attribute '" + key + "' must be an integer list");
}

template <typename T>
void expect_arity(std::string_view op, const std::vector<Tensor<T>>& in, std::size_t n) {
    if (in.size() != n)
        throw ShapeError(std::string(op) + ": expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
}

template <typename V>
std::vector<std::size_t> to_sizes(const V& v) {
    return std::vector<std::size_t>(v.begin(), v.end());
}

}  // namespace detail

inline const std::vector<std::string>& primitive_names() {
    static const std::vector<std::string> names = {
        "add",     "sub",         "mul",        "scale",   "matmul", "transpose", "reshape",   "concat",
        "slice",   "softmax",     "log_softmax", "layer_norm", "relu", "gelu",      "softplus",  "l2_norm",
        "mean",    "sum",         "broadcast",  "embedding", "batch_norm", "cross_entropy_soft", "cross_entropy_hard"};
    return names;
}

/// Runs the named primitive. Attribute keys per primitive:
///   scale: "s"; transpose: "axes" (optional); reshape/broadcast: "shape";
///   concat: "axis"; slice: "axis", "start", "length"; softmax/log_softmax/
///   l2_norm: "axis"; mean/sum: "axis" (optional, full reduction if absent);
///   embedding: "rows"; batch_norm: "training"; cross_entropy_hard: "labels".
template <typename T>
Tensor<T> primitive_forward(std::string_view op, const std::vector<Tensor<T>>& in, const Attrs& attrs = {}) {
    using namespace detail;
    const std::string name(op);
    if (name == "add") return expect_arity(op, in, 2), ops::add(in[0], in[1]);
    if (name == "sub") return expect_arity(op, in, 2), ops::sub(in[0], in[1]);
    if (name == "mul") return expect_arity(op, in, 2), ops::mul(in[0], in[1]);
    if (name == "scale") return expect_arity(op, in, 1), ops::scale(in[0], static_cast<T>(attr_f(attrs, "s", 1.0)));
    if (name == "matmul") return expect_arity(op, in, 2), ops::matmul(in[0], in[1]);
    if (name == "transpose") {
        expect_arity(op, in, 1);
        if (attrs.count("axes")) return ops::permute(in[0], to_sizes(attr_v(attrs, "axes")));
        return ops::transpose(in[0]);
    }
    if (name == "reshape") return expect_arity(op, in, 1), ops::reshape(in[0], to_sizes(attr_v(attrs, "shape")));
    if (name == "concat") return ops::concat(in, static_cast<long>(attr_i(attrs, "axis", 0)));
    if (name == "slice")
        return expect_arity(op, in, 1),
               ops::slice(in[0], static_cast<long>(attr_i(attrs, "axis", 0)),
                          static_cast<std::size_t>(attr_i(attrs, "start", 0)),
                          static_cast<std::size_t>(attr_i(attrs, "length", 1)));
    if (name == "softmax") return expect_arity(op, in, 1), ops::softmax(in[0], static_cast<long>(attr_i(attrs, "axis", -1)));
    if (name == "log_softmax")
        return expect_arity(op, in, 1), ops::log_softmax(in[0], static_cast<long>(attr_i(attrs, "axis", -1)));
    if (name == "layer_norm") return expect_arity(op, in, 3), ops::layer_norm(in[0], in[1], in[2]);
    if (name == "relu") return expect_arity(op, in, 1), ops::relu(in[0]);
    if (name == "gelu") return expect_arity(op, in, 1), ops::gelu(in[0]);
    if (name == "softplus") return expect_arity(op, in, 1), ops::softplus(in[0]);
    if (name == "l2_norm") return expect_arity(op, in, 1), ops::l2_normalize(in[0], static_cast<long>(attr_i(attrs, "axis", -1)));
    if (name == "mean" || name == "sum") {
        expect_arity(op, in, 1);
        const bool avg = name == "mean";
        if (attrs.count("axis")) return ops::sum(in[0], static_cast<long>(attr_i(attrs, "axis", 0)), avg);
        return avg ? ops::mean(in[0]) : ops::sum(in[0]);
    }
    if (name == "broadcast") return expect_arity(op, in, 1), ops::broadcast_to(in[0], to_sizes(attr_v(attrs, "shape")));
    if (name == "embedding") return expect_arity(op, in, 1), ops::embedding(in[0], to_sizes(attr_v(attrs, "rows")));
    if (name == "batch_norm") {
        expect_arity(op, in, 3);
        ops::BatchNormStats<T> stats(in[1].numel());
        return ops::batch_norm(in[0], in[1], in[2], stats, attr_i(attrs, "training", 1) != 0);
    }
    if (name == "cross_entropy_soft") return expect_arity(op, in, 2), ops::cross_entropy_soft(in[0], in[1]);
    if (name == "cross_entropy_hard") {
        expect_arity(op, in, 1);
        auto raw = attr_v(attrs, "labels");
        return ops::cross_entropy_hard(in[0], std::vector<int>(raw.begin(), raw.end()));
    }
    throw UnknownPrimitiveError("unknown primitive '" + name + "'");
}

}  // namespace solider
