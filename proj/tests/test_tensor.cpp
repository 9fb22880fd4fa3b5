#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "solider/primitives.hpp"
#include "support/gradcheck_cases.hpp"

namespace solider {
namespace {

using Td = Tensor<double>;
using testing::rand_tensor;

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Td({2, 3}, std::vector<double>(5)), ShapeError);
    Td t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, SoftplusClosedForms) {
    auto y = ops::softplus(Td({2}, {0.0, std::log(std::expm1(1.0))}));
    EXPECT_NEAR(y.data()[0], std::log(2.0), 1e-12);
    EXPECT_NEAR(y.data()[1], 1.0, 1e-12);
}

TEST(Tensor, SoftplusStrictlyPositiveAndStable) {
    auto y = ops::softplus(Td({5}, {-700.0, -40.0, 0.0, 40.0, 800.0}));
    for (double v : y.data()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GT(v, 0.0);
    }
    EXPECT_NEAR(y.data()[4], 800.0, 1e-9);
    EXPECT_NEAR(ops::softplus(Td({1}, {20.0})).item(), 20.0, 1e-8);
}

TEST(Tensor, SoftmaxOfEqualLogitsIsUniform) {
    auto y = ops::softmax(Td({4}, {1, 1, 1, 1}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = rand_tensor({4, 7}, rng, -30.0, 30.0);
        for (long axis : {0L, 1L}) {
            auto y = ops::softmax(x, axis);
            const std::size_t outer = axis == 0 ? 7 : 4, inner = axis == 0 ? 4 : 7;
            for (std::size_t o = 0; o < outer; ++o) {
                double s = 0.0;
                for (std::size_t i = 0; i < inner; ++i) {
                    const double v = axis == 0 ? y.data()[i * 7 + o] : y.data()[o * 7 + i];
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
        }
    }
}

TEST(Tensor, LogSoftmaxMatchesLogOfSoftmax) {
    Rng rng(4);
    auto x = rand_tensor({3, 5}, rng, -5.0, 5.0);
    auto a = ops::log_softmax(x), b = ops::softmax(x);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], std::log(b.data()[i]), 1e-12);
}

TEST(Tensor, CrossEntropyHardExamples) {
    EXPECT_NEAR(ops::cross_entropy_hard(Td({1, 4}, {0.3, 0.3, 0.3, 0.3}), {2}).item(), std::log(4.0), 1e-12);
    // Oracle: -log(e^10 / (e^10 + 3)).
    const double expect = -(10.0 - std::log(std::exp(10.0) + 3.0));
    EXPECT_NEAR(ops::cross_entropy_hard(Td({1, 4}, {10, 0, 0, 0}), {1}).item(), expect, 1e-12);
    EXPECT_NEAR(expect, 1.36e-4, 1e-6);
}

TEST(Tensor, CrossEntropyHardGradientAtUniform) {
    Td x({1, 4}, {0, 0, 0, 0}, true);
    backward(ops::cross_entropy_hard(x, {1}));
    const std::vector<double> expect{-0.75, 0.25, 0.25, 0.25};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], expect[i], 1e-12);
}

TEST(Tensor, CrossEntropyHardRejectsLabelsOutOfRange) {
    Td x({2, 4}, std::vector<double>(8, 0.0));
    EXPECT_THROW(ops::cross_entropy_hard(x, {1, 5}), std::out_of_range);
    EXPECT_THROW(ops::cross_entropy_hard(x, {0, 1}), std::out_of_range);
    EXPECT_THROW(ops::cross_entropy_hard(x, {1}), ShapeError);
    EXPECT_THROW(ops::cross_entropy_hard(Td({2, 1}, {0, 0}), {1, 1}), ShapeError);
}

TEST(Tensor, CrossEntropySoftMatchesDefinition) {
    Td logits({1, 3}, {1.0, 2.0, 3.0}), target({1, 3}, {0.2, 0.3, 0.5});
    auto ls = ops::log_softmax(logits);
    const double expect = -(0.2 * ls.data()[0] + 0.3 * ls.data()[1] + 0.5 * ls.data()[2]);
    EXPECT_NEAR(ops::cross_entropy_soft(logits, target).item(), expect, 1e-12);
}

TEST(Tensor, BackwardOfSquaredSum) {
    Td x({3}, {1, 2, 3}, true);
    backward(ops::sum(ops::mul(x, x)));
    EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Tensor, BackwardThroughIdentityChain) {
    Td eye({2, 2}, {1, 0, 0, 1});
    Td x({2, 2}, {1, 2, 3, 4}, true);
    auto y = ops::matmul(ops::matmul(eye, x), eye);
    backward(ops::sum(y));
    EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1, 1}));
}

TEST(Tensor, BackwardSumsOverPaths) {
    Rng rng(5);
    auto x0 = rand_tensor({4}, rng);
    auto path_a = [](const Td& x) { return ops::sum(ops::softplus(x)); };
    auto path_b = [](const Td& x) { return ops::sum(ops::mul(x, ops::gelu(x))); };
    Td xa = x0.clone(true), xb = x0.clone(true), xs = x0.clone(true);
    backward(path_a(xa));
    backward(path_b(xb));
    backward(ops::add(path_a(xs), path_b(xs)));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(xs.grad()[i], xa.grad()[i] + xb.grad()[i], 1e-14);
}

TEST(Tensor, SecondBackwardIsRejected) {
    Td x({2}, {1, 2}, true);
    auto y = ops::sum(ops::mul(x, x));
    backward(y);
    EXPECT_THROW(backward(y), StaleGraphError);
}

TEST(Tensor, BackwardRequiresScalarRoot) {
    Td x({2}, {1, 2}, true);
    EXPECT_THROW(backward(ops::mul(x, x)), ShapeError);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
    Td x({2}, {1, 2}, true);
    Td y;
    {
        NoGradGuard g;
        y = ops::sum(ops::mul(x, x));
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, GradientLengthMatchesData) {
    Rng rng(6);
    Td x = rand_tensor({3, 4}, rng).clone(true);
    backward(ops::sum(ops::layer_norm(x, Td::full({4}, 1.0), Td::zeros({4}))));
    EXPECT_EQ(x.grad().size(), x.data().size());
}

TEST(Tensor, BroadcastOnlyOverLeadingAxes) {
    Td a({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_NO_THROW(ops::add(a, Td({3}, {1, 2, 3})));
    EXPECT_NO_THROW(ops::add(a, Td::scalar(2.0)));
    try {
        ops::add(a, Td({2}, {1, 2}));
        FAIL() << "expected a shape error";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("(2, 3)"), std::string::npos);
        EXPECT_NE(msg.find("(2)"), std::string::npos);
    }
    EXPECT_THROW(ops::matmul(Td({2, 3}, std::vector<double>(6)), Td({2, 3}, std::vector<double>(6))), ShapeError);
}

TEST(Tensor, MatmulMatchesNaiveProduct) {
    Rng rng(7);
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({2, 4, 5}, rng);
    auto c = ops::matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < 4; ++k) s += a.data()[(n * 3 + i) * 4 + k] * b.data()[(n * 4 + k) * 5 + j];
                EXPECT_NEAR(c.data()[(n * 3 + i) * 5 + j], s, 1e-12);
            }
}

TEST(Tensor, LayerNormRowsHaveZeroMeanUnitVariance) {
    Rng rng(8);
    auto y = ops::layer_norm(rand_tensor({3, 16}, rng, -4, 4), Td::full({16}, 1.0), Td::zeros({16}));
    for (std::size_t r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (std::size_t k = 0; k < 16; ++k) m += y.data()[r * 16 + k] / 16.0;
        for (std::size_t k = 0; k < 16; ++k) v += std::pow(y.data()[r * 16 + k] - m, 2) / 16.0;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(Tensor, L2NormalizeGivesUnitRows) {
    Rng rng(9);
    auto y = ops::l2_normalize(rand_tensor({5, 6}, rng), -1);
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < 6; ++k) s += y.data()[r * 6 + k] * y.data()[r * 6 + k];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, BatchNormTrainUpdatesRunningStatsEvalFreezes) {
    ops::BatchNormStats<double> stats(1);
    Td x({4, 1}, {1, 2, 3, 4});
    auto y = ops::batch_norm(x, Td::full({1}, 1.0), Td::zeros({1}), stats, true);
    EXPECT_NEAR(stats.running_mean[0], 0.1 * 2.5, 1e-12);
    // Running variance uses the unbiased batch estimate.
    EXPECT_NEAR(stats.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
    double m = 0;
    for (double v : y.data()) m += v;
    EXPECT_NEAR(m, 0.0, 1e-12);
    const auto frozen = stats.running_mean;
    ops::batch_norm(x, Td::full({1}, 1.0), Td::zeros({1}), stats, false);
    EXPECT_EQ(stats.running_mean, frozen);
}

TEST(Tensor, EmbeddingGathersRows) {
    Td table({3, 2}, {0, 1, 10, 11, 20, 21});
    auto y = ops::embedding(table, {2, 0, 2});
    EXPECT_EQ(y.data(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
    EXPECT_THROW(ops::embedding(table, {3}), ShapeError);
}

TEST(Tensor, ConcatSliceRoundTrip) {
    Rng rng(10);
    auto a = rand_tensor({2, 3}, rng), b = rand_tensor({2, 4}, rng);
    auto c = ops::concat(std::vector<Td>{a, b}, 1);
    EXPECT_EQ(ops::slice(c, 1, 0, 3).data(), a.data());
    EXPECT_EQ(ops::slice(c, 1, 3, 4).data(), b.data());
    EXPECT_THROW(ops::slice(c, 1, 5, 3), ShapeError);
}

TEST(Tensor, PermuteThenInverseIsIdentity) {
    Rng rng(11);
    auto x = rand_tensor({2, 3, 4}, rng);
    auto y = ops::permute(ops::permute(x, {2, 0, 1}), {1, 2, 0});
    EXPECT_EQ(y.data(), x.data());
    EXPECT_EQ(y.shape(), x.shape());
}

TEST(Tensor, PrimitiveDispatchCoversCatalog) {
    EXPECT_EQ(primitive_names().size(), 23u);
    Td x({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(primitive_forward<double>("add", {x, x}).data(), (std::vector<double>{2, 4, 6, 8}));
    EXPECT_EQ(primitive_forward<double>("scale", {x}, {{"s", 3.0}}).data(), (std::vector<double>{3, 6, 9, 12}));
    EXPECT_EQ(primitive_forward<double>("transpose", {x}).data(), (std::vector<double>{1, 3, 2, 4}));
    EXPECT_EQ(primitive_forward<double>("sum", {x}, {{"axis", std::int64_t{0}}}).data(), (std::vector<double>{4, 6}));
    EXPECT_THROW(primitive_forward<double>("conv2d", {x}), UnknownPrimitiveError);
    EXPECT_THROW(primitive_forward<double>("add", {x}), ShapeError);
}

TEST(Tensor, OutputsFiniteOnFiniteInputs) {
    Rng rng(12);
    auto x = rand_tensor({4, 8}, rng, -50, 50).clone(true);
    auto y = ops::sum(ops::mul(ops::log_softmax(x), ops::softmax(ops::l2_normalize(ops::gelu(x), -1))));
    backward(y);
    EXPECT_TRUE(all_finite(y.data()));
    EXPECT_TRUE(all_finite(x.grad()));
}

TEST(Tensor, DeterministicEvaluation) {
    auto run = [] {
        Rng rng(13);
        auto x = rand_tensor({8, 16}, rng).clone(true);
        auto w = rand_tensor({16, 16}, rng);
        auto y = ops::sum(ops::softmax(ops::matmul(ops::layer_norm(x, Td::full({16}, 1.0), Td::zeros({16})), w), -1));
        backward(y);
        return std::pair{y.data(), x.grad()};
    };
    EXPECT_EQ(run(), run());
}

TEST(Tensor, FloatModeTrains) {
    Tensor<float> x({3}, {1.f, 2.f, 3.f}, true);
    backward(ops::sum(ops::mul(x, x)));
    EXPECT_EQ(x.grad(), (std::vector<float>{2.f, 4.f, 6.f}));
}

}  // namespace
}  // namespace solider
