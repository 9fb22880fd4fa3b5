#pragma once

// Semantic controller: lambda -> (softplus weight, bias) per channel, applied
// as out = softplus(w(lambda)) * fm + b(lambda) on channels-last features.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "solider/nn.hpp"

namespace solider {

/// Requested ratio of semantic information, constrained to [0, 1].
class ControlValue {
public:
    ControlValue() = default;
    explicit ControlValue(double lambda) : lambda_(lambda) {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::out_of_range("lambda must be in [0,1]");
    }
    double value() const { return lambda_; }

private:
    double lambda_ = 0.0;
};

template <typename T>
struct Controller {
    Linear<T> encode_hidden;  // 1 -> hidden
    Linear<T> encode_out;     // hidden -> 2c; first c are weight pre-activations, last c biases
    std::size_t channels = 0;

    std::size_t hidden() const { return encode_hidden.out_features(); }

    /// softplus(weight pre-activation) and raw bias, each of shape (c).
    std::pair<Tensor<T>, Tensor<T>> encode(ControlValue lam) const {
        Tensor<T> input({1, 1}, {static_cast<T>(lam.value())});
        auto h = ops::gelu(encode_hidden(input));
        auto wb = ops::reshape(encode_out(h), {2 * channels});
        auto w = ops::softplus(ops::slice(wb, 0, 0, channels));
        auto b = ops::slice(wb, 0, channels, channels);
        return {w, b};
    }

    Tensor<T> forward(const Tensor<T>& fm, ControlValue lam) const {
        if (fm.shape().back() != channels)
            throw ShapeError("controller: feature map " + shape_str(fm.shape()) + " has " + std::to_string(fm.shape().back()) +
                             " channels, controller expects " + std::to_string(channels));
        auto [w, b] = encode(lam);
        return ops::add(ops::mul(fm, w), b);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        encode_hidden.collect(ps, prefix + ".enc1");
        encode_out.collect(ps, prefix + ".enc2");
    }
};

/// Identity initialization: zero output weights, output bias set so the
/// weight path is softplus(ln(e-1)) = 1 and the bias path is 0.
template <typename T>
Controller<T> controller_init(std::size_t c, std::size_t hidden, std::uint64_t seed) {
    if (c < 1 || hidden < 1) throw std::invalid_argument("controller_init: channel and hidden counts must be positive");
    Rng rng(seed);
    Controller<T> ctl;
    ctl.channels = c;
    ctl.encode_hidden.weight = Tensor<T>({1, hidden}, init::uniform<T>(hidden, 1.0, rng), true);
    ctl.encode_hidden.bias = Tensor<T>({hidden}, init::uniform<T>(hidden, 1.0, rng), true);
    ctl.encode_out.weight = Tensor<T>::zeros({hidden, 2 * c}, true);
    std::vector<T> bias(2 * c, T(0));
    const T identity = static_cast<T>(std::log(std::expm1(1.0)));
    for (std::size_t k = 0; k < c; ++k) bias[k] = identity;
    ctl.encode_out.bias = Tensor<T>({2 * c}, std::move(bias), true);
    return ctl;
}

}  // namespace solider
