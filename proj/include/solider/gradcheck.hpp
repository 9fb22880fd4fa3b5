#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "solider/tensor.hpp"

namespace solider {

/// Compares the tape gradient of a scalar function against central
/// differences. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
template <typename T = double>
T finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T epsilon) {
    if (!(epsilon > T(0))) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
    Tensor<T> probe = x.clone(true);
    Tensor<T> y = f(probe);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
    if (!std::isfinite(y.item())) throw NonFiniteError("finite_diff_check: f(x) is not finite");

    std::vector<T> analytic(x.numel(), T(0));
    if (y.requires_grad()) {
        backward(y);
        if (probe.has_grad()) analytic = probe.grad();
    }

    T worst = T(0);
    std::vector<T> base = x.data();
    NoGradGuard guard;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<T> v = base;
        v[i] = base[i] + epsilon;
        const T fp = f(Tensor<T>(x.shape(), v)).item();
        v[i] = base[i] - epsilon;
        const T fm = f(Tensor<T>(x.shape(), v)).item();
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFiniteError("finite_diff_check: non-finite perturbed value");
        const T numeric = (fp - fm) / (T(2) * epsilon);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(analytic[i])));
    }
    return worst;
}

}  // namespace solider
