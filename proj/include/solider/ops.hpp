#pragma once

// Differentiable primitives. Broadcasting is limited to two cases: the
// second operand is a scalar, or its shape equals a trailing suffix of the
// first operand's shape (leading-batch broadcast).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "solider/tensor.hpp"

namespace solider::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::size_t check_broadcast(const char* op, const Shape& a, const Shape& b) {
    if (numel_of(b) == 1 || is_suffix(a, b)) return numel_of(b);
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

inline std::size_t normalize_axis(const char* op, long axis, std::size_t ndim) {
    long a = axis < 0 ? axis + static_cast<long>(ndim) : axis;
    if (a < 0 || a >= static_cast<long>(ndim))
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(ndim));
    return static_cast<std::size_t>(a);
}

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <typename T>
void accumulate(Node<T>& parent, const std::vector<T>& g) {
    if (!parent.requires_grad) return;
    auto& pg = parent.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

template <typename T>
T softplus_scalar(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

namespace detail {

/// Calls f(offset) for each repetition of an nb-element operand across total.
template <typename T, typename F>
void for_each_block(std::size_t total, std::size_t nb, F&& f) {
    for (std::size_t o = 0; o < total; o += nb) f(o);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() < b.numel()) return add(b, a);
    const std::size_t nb = detail::check_broadcast("add", a.shape(), b.shape());
    std::vector<T> out(a.data());
    const T* bd = b.data().data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        T* dst = out.data() + o;
        for (std::size_t j = 0; j < nb; ++j) dst[j] += bd[j];
    });
    return make_result<T>("add", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (pb.requires_grad) {
            T* g = pb.ensure_grad().data();
            const T* sg = self.grad.data();
            detail::for_each_block<T>(self.grad.size(), nb, [&](std::size_t o) {
                for (std::size_t j = 0; j < nb; ++j) g[j] += sg[o + j];
            });
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t nb = detail::check_broadcast("sub", a.shape(), b.shape());
    std::vector<T> out(a.data());
    const T* bd = b.data().data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        T* dst = out.data() + o;
        for (std::size_t j = 0; j < nb; ++j) dst[j] -= bd[j];
    });
    return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (pb.requires_grad) {
            T* g = pb.ensure_grad().data();
            const T* sg = self.grad.data();
            detail::for_each_block<T>(self.grad.size(), nb, [&](std::size_t o) {
                for (std::size_t j = 0; j < nb; ++j) g[j] -= sg[o + j];
            });
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.numel() < b.numel()) return mul(b, a);
    const std::size_t nb = detail::check_broadcast("mul", a.shape(), b.shape());
    std::vector<T> out(a.data());
    const T* bd = b.data().data();
    detail::for_each_block<T>(out.size(), nb, [&](std::size_t o) {
        T* dst = out.data() + o;
        for (std::size_t j = 0; j < nb; ++j) dst[j] *= bd[j];
    });
    return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [nb](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T* g = self.grad.data();
        const std::size_t total = self.grad.size();
        if (pa.requires_grad) {
            T* ga = pa.ensure_grad().data();
            const T* bv = pb.data.data();
            detail::for_each_block<T>(total, nb, [&](std::size_t o) {
                for (std::size_t j = 0; j < nb; ++j) ga[o + j] += g[o + j] * bv[j];
            });
        }
        if (pb.requires_grad) {
            T* gb = pb.ensure_grad().data();
            const T* av = pa.data.data();
            detail::for_each_block<T>(total, nb, [&](std::size_t o) {
                for (std::size_t j = 0; j < nb; ++j) gb[j] += g[o + j] * av[o + j];
            });
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data());
    for (auto& v : out) v *= s;
    return make_result<T>("scale", a.shape(), std::move(out), {a}, [s](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& ga = pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += s * self.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return make_result<T>("relu", a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& ga = pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (pa.data[i] > T(0)) ga[i] += self.grad[i];
    });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    const T inv_sqrt2 = T(0.70710678118654752440);
    std::vector<T> out(a.data());
    for (auto& v : out) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    return make_result<T>("gelu", a.shape(), std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
        const T inv_sqrt2pi = T(0.39894228040143267794);
        auto& pa = *self.parents[0];
        auto& ga = pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = pa.data[i];
            const T d = T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            ga[i] += self.grad[i] * d;
        }
    });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = detail::softplus_scalar(v);
    return make_result<T>("softplus", a.shape(), std::move(out), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& ga = pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * detail::sigmoid_scalar(pa.data[i]);
    });
}

// ------------------------------------------------------------------- products

/// (..., M, K) x (K, N) or (..., M, K) x (..., K, N) with matching batch dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    using Mat = detail::RowMat<T>;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    const std::size_t M = as[as.size() - 2], K = as.back();
    const std::size_t Kb = bs[bs.size() - 2], N = bs.back();
    if (K != Kb) throw ShapeError("matmul: inner dims differ, " + shape_str(as) + " x " + shape_str(bs));
    const bool shared_b = bs.size() == 2;
    if (!shared_b) {
        if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))
            throw ShapeError("matmul: batch dims differ, " + shape_str(as) + " x " + shape_str(bs));
    }
    const std::size_t batch = a.numel() / (M * K);
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(N);
    std::vector<T> out(batch * M * N);
    if (shared_b) {
        Eigen::Map<const Mat> A(a.data().data(), batch * M, K);
        Eigen::Map<const Mat> B(b.data().data(), K, N);
        Eigen::Map<Mat> C(out.data(), batch * M, N);
        C.noalias() = A * B;
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            Eigen::Map<const Mat> A(a.data().data() + i * M * K, M, K);
            Eigen::Map<const Mat> B(b.data().data() + i * K * N, K, N);
            Eigen::Map<Mat> C(out.data() + i * M * N, M, N);
            C.noalias() = A * B;
        }
    }
    return make_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                          [=](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const std::size_t rows = shared_b ? batch * M : M;
                              const std::size_t reps = shared_b ? 1 : batch;
                              for (std::size_t i = 0; i < reps; ++i) {
                                  Eigen::Map<const Mat> G(self.grad.data() + i * M * N, rows, N);
                                  if (pa.requires_grad) {
                                      Eigen::Map<const Mat> B(pb.data.data() + (shared_b ? 0 : i * K * N), K, N);
                                      Eigen::Map<Mat> GA(pa.ensure_grad().data() + i * M * K, rows, K);
                                      GA.noalias() += G * B.transpose();
                                  }
                                  if (pb.requires_grad) {
                                      Eigen::Map<const Mat> A(pa.data.data() + i * M * K, rows, K);
                                      Eigen::Map<Mat> GB(pb.ensure_grad().data() + (shared_b ? 0 : i * K * N), K, N);
                                      GB.noalias() += A.transpose() * G;
                                  }
                              }
                          });
}

// ------------------------------------------------------------- layout / views

namespace detail {
template <typename T>
void permute_copy(const std::vector<T>& src, const Shape& src_shape, const std::vector<std::size_t>& axes,
                  std::vector<T>& dst) {
    const std::size_t nd = src_shape.size();
    std::vector<std::size_t> src_stride(nd, 1);
    for (std::size_t i = nd - 1; i-- > 0;) src_stride[i] = src_stride[i + 1] * src_shape[i + 1];
    Shape out_shape(nd);
    std::vector<std::size_t> stride(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        out_shape[i] = src_shape[axes[i]];
        stride[i] = src_stride[axes[i]];
    }
    // Innermost output axis is walked in a tight loop.
    const std::size_t inner_n = out_shape[nd - 1];
    const std::size_t inner_s = stride[nd - 1];
    std::vector<std::size_t> idx(nd, 0);
    std::size_t off = 0;
    const std::size_t total = src.size();
    for (std::size_t o = 0; o < total; o += inner_n) {
        const T* s = src.data() + off;
        T* d = dst.data() + o;
        for (std::size_t j = 0; j < inner_n; ++j) d[j] = s[j * inner_s];
        for (std::size_t ax = nd - 1; ax-- > 0;) {
            off += stride[ax];
            if (++idx[ax] < out_shape[ax]) break;
            off -= stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
}  // namespace detail

/// General axis permutation; output axis i is input axis axes[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> axes) {
    const std::size_t nd = a.dim();
    if (axes.size() != nd) throw ShapeError("permute: " + std::to_string(axes.size()) + " axes for rank " + std::to_string(nd));
    std::vector<bool> used(nd, false);
    for (auto ax : axes) {
        if (ax >= nd || used[ax]) throw ShapeError("permute: invalid axis list for " + shape_str(a.shape()));
        used[ax] = true;
    }
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[axes[i]];
    std::vector<T> out(a.numel());
    detail::permute_copy(a.data(), a.shape(), axes, out);
    std::vector<std::size_t> inverse(nd);
    for (std::size_t i = 0; i < nd; ++i) inverse[axes[i]] = i;
    return make_result<T>("transpose", out_shape, std::move(out), {a}, [inverse, out_shape](Node<T>& self) {
        auto& pa = *self.parents[0];
        std::vector<T> g(self.grad.size());
        detail::permute_copy(self.grad, out_shape, inverse, g);
        detail::accumulate(pa, g);
    });
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.dim() < 2) throw ShapeError("transpose: rank < 2 for " + shape_str(a.shape()));
    std::vector<std::size_t> axes(a.dim());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    std::swap(axes[a.dim() - 1], axes[a.dim() - 2]);
    return permute(a, axes);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return make_result<T>("reshape", std::move(shape), a.data(), {a},
                          [](Node<T>& self) { detail::accumulate(*self.parents[0], self.grad); });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis_in) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const std::size_t axis = detail::normalize_axis("concat", axis_in, s0.size());
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
        if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0) + " on axis " + std::to_string(axis));
        widths.push_back(s[axis]);
        total += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total;
    const auto sp = detail::split_at(out_shape, axis);
    std::vector<T> out(numel_of(out_shape));
    std::size_t start = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& d = parts[k].data();
        const std::size_t w = widths[k] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(d.begin() + o * w, w, out.begin() + o * sp.n * sp.inner + start * sp.inner);
        start += widths[k];
    }
    return make_result<T>("concat", out_shape, std::move(out), parts, [widths, sp](Node<T>& self) {
        std::size_t start = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& p = *self.parents[k];
            const std::size_t w = widths[k] * sp.inner;
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * sp.n * sp.inner + start * sp.inner + j];
            }
            start += widths[k];
        }
    });
}

/// Elements [start, start+length) along axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, long axis_in, std::size_t start, std::size_t length) {
    const std::size_t axis = detail::normalize_axis("slice", axis_in, a.dim());
    if (length == 0 || start + length > a.shape()[axis])
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    const auto sp = detail::split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    const std::size_t w = length * sp.inner;
    std::vector<T> out(sp.outer * w);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(a.data().begin() + o * sp.n * sp.inner + start * sp.inner, w, out.begin() + o * w);
    return make_result<T>("slice", out_shape, std::move(out), {a}, [sp, start, w](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < w; ++j) g[o * sp.n * sp.inner + start * sp.inner + j] += self.grad[o * w + j];
    });
}

/// Repeats a along new leading dims; a.shape must be a suffix of shape.
template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, Shape shape) {
    if (!detail::is_suffix(shape, a.shape()))
        throw ShapeError("broadcast: " + shape_str(a.shape()) + " is not a suffix of " + shape_str(shape));
    const std::size_t na = a.numel();
    std::vector<T> out(numel_of(shape));
    for (std::size_t o = 0; o < out.size(); o += na) std::copy_n(a.data().begin(), na, out.begin() + o);
    return make_result<T>("broadcast", std::move(shape), std::move(out), {a}, [na](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); o += na)
            for (std::size_t j = 0; j < na; ++j) g[j] += self.grad[o + j];
    });
}

/// Row gather: table (V, D), rows -> (rows.size(), D).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& rows) {
    if (table.dim() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    if (rows.empty()) throw ShapeError("embedding: empty index list");
    const std::size_t V = table.size(0), D = table.size(1);
    std::vector<T> out(rows.size() * D);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= V) throw ShapeError("embedding: index " + std::to_string(rows[r]) + " >= " + std::to_string(V));
        std::copy_n(table.data().begin() + rows[r] * D, D, out.begin() + r * D);
    }
    return make_result<T>("embedding", {rows.size(), D}, std::move(out), {table}, [rows, D](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < D; ++j) g[rows[r] * D + j] += self.grad[r * D + j];
    });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.data()) s += v;
    return make_result<T>("sum", {1}, {s}, {a}, [](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    const T inv = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    for (T v : a.data()) s += v;
    return make_result<T>("mean", {1}, {s * inv}, {a}, [inv](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

/// Sum over one axis, which is removed from the shape.
template <typename T>
Tensor<T> sum(const Tensor<T>& a, long axis_in, bool average = false) {
    const std::size_t axis = detail::normalize_axis("sum", axis_in, a.dim());
    const auto sp = detail::split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
    if (out_shape.empty()) out_shape.push_back(1);
    const T f = average ? T(1) / static_cast<T>(sp.n) : T(1);
    std::vector<T> out(sp.outer * sp.inner, T(0));
    const auto& d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += d[(o * sp.n + k) * sp.inner + i];
    for (auto& v : out) v *= f;
    return make_result<T>(average ? "mean" : "sum", std::move(out_shape), std::move(out), {a}, [sp, f](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < sp.n; ++k)
                for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.n + k) * sp.inner + i] += f * self.grad[o * sp.inner + i];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, long axis) {
    return sum(a, axis, true);
}

// --------------------------------------------------------------- normalizers

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, long axis_in = -1) {
    const std::size_t axis = detail::normalize_axis("softmax", axis_in, a.dim());
    const auto sp = detail::split_at(a.shape(), axis);
    std::vector<T> out(a.numel());
    const auto& d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, d[base + k * sp.inner]);
            T z = T(0);
            for (std::size_t k = 0; k < sp.n; ++k) z += (out[base + k * sp.inner] = std::exp(d[base + k * sp.inner] - mx));
            for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
        }
    return make_result<T>("softmax", a.shape(), std::move(out), {a}, [sp](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.n * sp.inner + i;
                T dot = T(0);
                for (std::size_t k = 0; k < sp.n; ++k) dot += self.grad[base + k * sp.inner] * y[base + k * sp.inner];
                for (std::size_t k = 0; k < sp.n; ++k) {
                    const std::size_t j = base + k * sp.inner;
                    g[j] += y[j] * (self.grad[j] - dot);
                }
            }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, long axis_in = -1) {
    const std::size_t axis = detail::normalize_axis("log_softmax", axis_in, a.dim());
    const auto sp = detail::split_at(a.shape(), axis);
    std::vector<T> out(a.numel());
    const auto& d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, d[base + k * sp.inner]);
            T z = T(0);
            for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(d[base + k * sp.inner] - mx);
            const T lse = mx + std::log(z);
            for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = d[base + k * sp.inner] - lse;
        }
    return make_result<T>("log_softmax", a.shape(), std::move(out), {a}, [sp](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.n * sp.inner + i;
                T gs = T(0);
                for (std::size_t k = 0; k < sp.n; ++k) gs += self.grad[base + k * sp.inner];
                for (std::size_t k = 0; k < sp.n; ++k) {
                    const std::size_t j = base + k * sp.inner;
                    g[j] += self.grad[j] - std::exp(y[j]) * gs;
                }
            }
    });
}

/// Layer norm over the last axis with affine gamma/beta of that width.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t D = x.shape().back();
    if (gamma.numel() != D || beta.numel() != D)
        throw ShapeError("layer_norm: affine width " + std::to_string(gamma.numel()) + " vs feature dim " + std::to_string(D));
    const std::size_t rows = x.numel() / D;
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    const auto& d = x.data();
    const auto& ga = gamma.data();
    const auto& be = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = d.data() + r * D;
        T mu = T(0);
        for (std::size_t j = 0; j < D; ++j) mu += xr[j];
        mu /= static_cast<T>(D);
        T var = T(0);
        for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(D);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < D; ++j) {
            const T h = (xr[j] - mu) * rstd[r];
            xhat[r * D + j] = h;
            out[r * D + j] = h * ga[j] + be[j];
        }
    }
    return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                          [D, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                              auto& px = *self.parents[0];
                              auto& pg = *self.parents[1];
                              auto& pb = *self.parents[2];
                              const auto& g = self.grad;
                              if (pg.requires_grad || pb.requires_grad) {
                                  auto& gg = pg.ensure_grad();
                                  auto& gb = pb.ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < D; ++j) {
                                          gg[j] += g[r * D + j] * xhat[r * D + j];
                                          gb[j] += g[r * D + j];
                                      }
                              }
                              if (px.requires_grad) {
                                  auto& gx = px.ensure_grad();
                                  const T invD = T(1) / static_cast<T>(D);
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      T m1 = T(0), m2 = T(0);
                                      for (std::size_t j = 0; j < D; ++j) {
                                          const T dh = g[r * D + j] * pg.data[j];
                                          m1 += dh;
                                          m2 += dh * xhat[r * D + j];
                                      }
                                      m1 *= invD;
                                      m2 *= invD;
                                      for (std::size_t j = 0; j < D; ++j) {
                                          const T dh = g[r * D + j] * pg.data[j];
                                          gx[r * D + j] += rstd[r] * (dh - m1 - xhat[r * D + j] * m2);
                                      }
                                  }
                              }
                          });
}

/// x / max(||x||_2, eps) along axis.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, long axis_in = -1, T eps = T(1e-12)) {
    const std::size_t axis = detail::normalize_axis("l2_normalize", axis_in, a.dim());
    const auto sp = detail::split_at(a.shape(), axis);
    std::vector<T> out(a.numel());
    std::vector<T> norms(sp.outer * sp.inner);
    const auto& d = a.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            T s = T(0);
            for (std::size_t k = 0; k < sp.n; ++k) s += d[base + k * sp.inner] * d[base + k * sp.inner];
            const T nrm = std::max(std::sqrt(s), eps);
            norms[o * sp.inner + i] = nrm;
            for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = d[base + k * sp.inner] / nrm;
        }
    return make_result<T>("l2_norm", a.shape(), std::move(out), {a}, [sp, eps, norms = std::move(norms)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.n * sp.inner + i;
                const T nrm = norms[o * sp.inner + i];
                if (nrm <= eps) {
                    for (std::size_t k = 0; k < sp.n; ++k) g[base + k * sp.inner] += self.grad[base + k * sp.inner] / eps;
                    continue;
                }
                T dot = T(0);
                for (std::size_t k = 0; k < sp.n; ++k) dot += self.grad[base + k * sp.inner] * y[base + k * sp.inner];
                for (std::size_t k = 0; k < sp.n; ++k) {
                    const std::size_t j = base + k * sp.inner;
                    g[j] += (self.grad[j] - y[j] * dot) / nrm;
                }
            }
    });
}

/// Running statistics for batch_norm; updated in training mode only.
template <typename T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    explicit BatchNormStats(std::size_t c = 0) : running_mean(c, T(0)), running_var(c, T(1)) {}
};

/// Batch norm over rows of x (M, C).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.dim() != 2) throw ShapeError("batch_norm: expects (M, C), got " + shape_str(x.shape()));
    const std::size_t M = x.size(0), C = x.size(1);
    if (gamma.numel() != C || beta.numel() != C || stats.running_mean.size() != C)
        throw ShapeError("batch_norm: channel count " + std::to_string(C) + " does not match parameters");
    if (training && M < 2) throw ShapeError("batch_norm: training mode needs at least 2 rows");
    const auto& d = x.data();
    std::vector<T> mu(C, T(0)), rstd(C);
    if (training) {
        std::vector<T> var(C, T(0));
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t c = 0; c < C; ++c) mu[c] += d[m * C + c];
        for (auto& v : mu) v /= static_cast<T>(M);
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t c = 0; c < C; ++c) var[c] += (d[m * C + c] - mu[c]) * (d[m * C + c] - mu[c]);
        for (std::size_t c = 0; c < C; ++c) {
            const T biased = var[c] / static_cast<T>(M);
            rstd[c] = T(1) / std::sqrt(biased + eps);
            const T unbiased = var[c] / static_cast<T>(M - 1);
            stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu[c];
            stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = stats.running_mean[c];
            rstd[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
        }
    }
    std::vector<T> xhat(x.numel()), out(x.numel());
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t c = 0; c < C; ++c) {
            const T h = (d[m * C + c] - mu[c]) * rstd[c];
            xhat[m * C + c] = h;
            out[m * C + c] = h * gamma.data()[c] + beta.data()[c];
        }
    return make_result<T>("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                          [M, C, training, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                              auto& px = *self.parents[0];
                              auto& pg = *self.parents[1];
                              auto& pb = *self.parents[2];
                              const auto& g = self.grad;
                              if (pg.requires_grad || pb.requires_grad) {
                                  auto& gg = pg.ensure_grad();
                                  auto& gb = pb.ensure_grad();
                                  for (std::size_t m = 0; m < M; ++m)
                                      for (std::size_t c = 0; c < C; ++c) {
                                          gg[c] += g[m * C + c] * xhat[m * C + c];
                                          gb[c] += g[m * C + c];
                                      }
                              }
                              if (!px.requires_grad) return;
                              auto& gx = px.ensure_grad();
                              if (!training) {
                                  for (std::size_t m = 0; m < M; ++m)
                                      for (std::size_t c = 0; c < C; ++c) gx[m * C + c] += g[m * C + c] * pg.data[c] * rstd[c];
                                  return;
                              }
                              std::vector<T> m1(C, T(0)), m2(C, T(0));
                              for (std::size_t m = 0; m < M; ++m)
                                  for (std::size_t c = 0; c < C; ++c) {
                                      const T dh = g[m * C + c] * pg.data[c];
                                      m1[c] += dh;
                                      m2[c] += dh * xhat[m * C + c];
                                  }
                              const T invM = T(1) / static_cast<T>(M);
                              for (std::size_t m = 0; m < M; ++m)
                                  for (std::size_t c = 0; c < C; ++c) {
                                      const T dh = g[m * C + c] * pg.data[c];
                                      gx[m * C + c] += rstd[c] * (dh - m1[c] * invM - xhat[m * C + c] * m2[c] * invM);
                                  }
                          });
}

// --------------------------------------------------------------------- losses

/// Mean over rows of -sum_k target[k] * log softmax(logits)[k]. Targets are
/// treated as constants.
template <typename T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.dim() != 2 || targets.shape() != logits.shape())
        throw ShapeError("cross_entropy_soft: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
    const std::size_t M = logits.size(0), K = logits.size(1);
    const auto& z = logits.data();
    const auto& t = targets.data();
    std::vector<T> p(z.size());
    T loss = T(0);
    for (std::size_t m = 0; m < M; ++m) {
        const T* zr = z.data() + m * K;
        T mx = *std::max_element(zr, zr + K);
        T s = T(0);
        for (std::size_t k = 0; k < K; ++k) s += (p[m * K + k] = std::exp(zr[k] - mx));
        const T lse = mx + std::log(s);
        for (std::size_t k = 0; k < K; ++k) {
            p[m * K + k] /= s;
            loss -= t[m * K + k] * (zr[k] - lse);
        }
    }
    loss /= static_cast<T>(M);
    auto tgt = targets.data();
    return make_result<T>("cross_entropy_soft", {1}, {loss}, {logits},
                          [M, K, p = std::move(p), tgt = std::move(tgt)](Node<T>& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              const T f = self.grad[0] / static_cast<T>(M);
                              for (std::size_t m = 0; m < M; ++m) {
                                  T ts = T(0);
                                  for (std::size_t k = 0; k < K; ++k) ts += tgt[m * K + k];
                                  for (std::size_t k = 0; k < K; ++k)
                                      g[m * K + k] += f * (p[m * K + k] * ts - tgt[m * K + k]);
                              }
                          });
}

/// Mean over rows of -log softmax(logits)[label]. Labels are 1-based class
/// indices in 1..K. A rank-1 logits tensor is treated as a single row.
template <typename T>
Tensor<T> cross_entropy_hard(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.dim() > 2 || (logits.dim() == 2 && logits.size(0) != labels.size()) ||
        (logits.dim() == 1 && labels.size() != 1))
        throw ShapeError("cross_entropy_hard: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    const std::size_t K = logits.shape().back();
    const std::size_t M = labels.size();
    if (K < 2) throw ShapeError("cross_entropy_hard: need at least 2 classes");
    for (int l : labels)
        if (l < 1 || static_cast<std::size_t>(l) > K)
            throw std::out_of_range("cross_entropy_hard: label " + std::to_string(l) + " outside 1.." + std::to_string(K));
    const auto& z = logits.data();
    std::vector<T> p(z.size());
    T loss = T(0);
    for (std::size_t m = 0; m < M; ++m) {
        const T* zr = z.data() + m * K;
        T mx = *std::max_element(zr, zr + K);
        T s = T(0);
        for (std::size_t k = 0; k < K; ++k) s += (p[m * K + k] = std::exp(zr[k] - mx));
        for (std::size_t k = 0; k < K; ++k) p[m * K + k] /= s;
        const std::size_t y = static_cast<std::size_t>(labels[m] - 1);
        loss -= (zr[y] - mx) - std::log(s);
    }
    loss /= static_cast<T>(M);
    return make_result<T>("cross_entropy_hard", {1}, {loss}, {logits}, [M, K, labels, p = std::move(p)](Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        const T f = self.grad[0] / static_cast<T>(M);
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t y = static_cast<std::size_t>(labels[m] - 1);
            for (std::size_t k = 0; k < K; ++k) g[m * K + k] += f * (p[m * K + k] - (k == y ? T(1) : T(0)));
        }
    });
}

}  // namespace solider::ops
