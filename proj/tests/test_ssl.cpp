#include <gtest/gtest.h>

#include <cmath>

#include "solider/ssl.hpp"
#include "support/gradcheck_cases.hpp"

namespace solider {
namespace {

using Td = Tensor<double>;
using testing::rand_tensor;

TEST(DinoLoss, UniformDistributionsGiveLogK) {
    const Td zeros = Td::zeros({3, 4});
    EXPECT_NEAR(dino_loss(zeros, zeros, Td::zeros({4}), 0.1, 0.04).item(), std::log(4.0), 1e-12);
    const Td big = Td::zeros({2, 1024});
    EXPECT_NEAR(dino_loss(big, big, Td::zeros({1024}), 0.1, 0.04).item(), std::log(1024.0), 1e-9);
}

TEST(DinoLoss, OneHotTeacherUniformStudent) {
    Td teacher({1, 4}, {0, 0, 50, 0});
    EXPECT_NEAR(dino_loss(Td::zeros({1, 4}), teacher, Td::zeros({4}), 0.1, 0.04).item(), std::log(4.0), 1e-12);
}

TEST(DinoLoss, MatchesDefinition) {
    Rng rng(1);
    const auto s = rand_tensor({3, 5}, rng), t = rand_tensor({3, 5}, rng), c = rand_tensor({5}, rng, -0.1, 0.1);
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        double zt = 0, zs = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            zt += std::exp((t.data()[i * 5 + k] - c.data()[k]) / 0.04);
            zs += std::exp(s.data()[i * 5 + k] / 0.1);
        }
        for (std::size_t k = 0; k < 5; ++k) {
            const double pt = std::exp((t.data()[i * 5 + k] - c.data()[k]) / 0.04) / zt;
            expect -= pt * std::log(std::exp(s.data()[i * 5 + k] / 0.1) / zs) / 3.0;
        }
    }
    EXPECT_NEAR(dino_loss(s, t, c, 0.1, 0.04).item(), expect, 1e-10);
}

TEST(DinoLoss, NonNegativeAndTeacherRowsNormalized) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = rand_tensor({4, 6}, rng, -3, 3), t = rand_tensor({4, 6}, rng, -3, 3), c = rand_tensor({6}, rng);
        EXPECT_GE(dino_loss(s, t, c, 0.1, 0.04).item(), 0.0);
        const auto pt = teacher_distribution(t, c, 0.04);
        for (std::size_t i = 0; i < 4; ++i) {
            double sum = 0;
            for (std::size_t k = 0; k < 6; ++k) sum += pt.data()[i * 6 + k];
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(DinoLoss, NoGradientIntoTeacher) {
    Rng rng(3);
    Td s = rand_tensor({2, 4}, rng).clone(true), t = rand_tensor({2, 4}, rng).clone(true);
    Td c = rand_tensor({4}, rng).clone(true);
    backward(dino_loss(s, t, c, 0.1, 0.04));
    EXPECT_TRUE(s.has_grad());
    EXPECT_FALSE(t.has_grad());
    EXPECT_FALSE(c.has_grad());
}

TEST(DinoLoss, RejectsBadArguments) {
    const Td z = Td::zeros({2, 4});
    EXPECT_THROW(dino_loss(z, z, Td::zeros({4}), 0.0, 0.04), std::invalid_argument);
    EXPECT_THROW(dino_loss(z, z, Td::zeros({4}), 0.1, -1.0), std::invalid_argument);
    EXPECT_THROW(dino_loss(z, Td::zeros({2, 3}), Td::zeros({4}), 0.1, 0.04), ShapeError);
    EXPECT_THROW(dino_loss(z, z, Td::zeros({3}), 0.1, 0.04), ShapeError);
}

TEST(ProjectionHead, OutputWidthIsPrototypeCount) {
    Rng rng(4);
    ProjectionHeadConfig pc;
    ProjectionHead<double> head(16, pc, rng);
    const auto out = head.forward(rand_tensor({3, 16}, rng));
    EXPECT_EQ(out.shape(), (Shape{3, 1024}));
    // Cosine logits of unit vectors are bounded by one.
    for (double v : out.data()) EXPECT_LE(std::abs(v), 1.0 + 1e-12);
}

ParamSet<double> single(const std::string& name, Td t) {
    ParamSet<double> ps;
    ps.add(name, std::move(t));
    return ps;
}

TEST(Ema, ClosedFormExamples) {
    auto t = single("p", Td({1}, {1.0}));
    ema_update(t, single("p", Td({1}, {0.0})), 0.9);
    EXPECT_EQ(t.at("p").item(), 0.9 * 1.0 + (1.0 - 0.9) * 0.0);
    EXPECT_NEAR(t.at("p").item(), 0.9, 1e-15);

    auto full = single("p", Td({3}, {1.0, -2.0, 5.0}));
    ema_update(full, single("p", Td({3}, {7.0, 8.0, 9.0})), 0.0);
    EXPECT_EQ(full.at("p").data(), (std::vector<double>{7.0, 8.0, 9.0}));

    auto twice = single("p", Td({1}, {3.0}));
    const auto zero = single("p", Td({1}, {0.0}));
    ema_update(twice, zero, 0.996);
    ema_update(twice, zero, 0.996);
    EXPECT_EQ(twice.at("p").item(), 0.996 * (0.996 * 3.0));
}

TEST(Ema, BitExactElementwiseUpdate) {
    Rng rng(5);
    const auto t0 = rand_tensor({50}, rng), s = rand_tensor({50}, rng);
    auto t = single("p", t0.clone(false));
    const double m = 0.996;
    ema_update(t, single("p", s), m);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(t.at("p").data()[i], m * t0.data()[i] + (1.0 - m) * s.data()[i]);
}

TEST(Ema, LinearInTeacher) {
    Rng rng(6);
    const auto t1 = rand_tensor({8}, rng), t2 = rand_tensor({8}, rng), s = rand_tensor({8}, rng);
    std::vector<double> mid(8);
    for (std::size_t i = 0; i < 8; ++i) mid[i] = 0.5 * (t1.data()[i] + t2.data()[i]);
    auto a = single("p", t1.clone(false)), b = single("p", t2.clone(false)), c = single("p", Td({8}, mid));
    const auto sp = single("p", s);
    ema_update(a, sp, 0.7);
    ema_update(b, sp, 0.7);
    ema_update(c, sp, 0.7);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(c.at("p").data()[i], 0.5 * (a.at("p").data()[i] + b.at("p").data()[i]), 1e-15);
}

TEST(Ema, StructureMismatchLeavesTeacherUntouched) {
    ParamSet<double> t, s;
    t.add("a", Td({2}, {1, 2}));
    t.add("b", Td({2}, {3, 4}));
    s.add("a", Td({2}, {0, 0}));
    s.add("b", Td({3}, {0, 0, 0}));
    EXPECT_THROW(ema_update(t, s, 0.5), StructureMismatch);
    EXPECT_EQ(t.at("a").data(), (std::vector<double>{1, 2}));
    ParamSet<double> missing;
    missing.add("a", Td({2}, {0, 0}));
    EXPECT_THROW(ema_update(t, missing, 0.5), StructureMismatch);
    EXPECT_THROW(ema_update(t, t, 1.0), std::invalid_argument);
}

TEST(Center, ClosedFormExamples) {
    const auto c = center_update(Td::zeros({2}), Td({2, 2}, {1, 0.5, 1, 1.5}), 0.9);
    EXPECT_NEAR(c.data()[0], 0.1, 1e-15);
    EXPECT_NEAR(c.data()[1], 0.1, 1e-15);
    EXPECT_EQ(c.data()[0], 0.9 * 0.0 + (1.0 - 0.9) * 1.0);
    const Td start({2}, {0.3, -0.7});
    EXPECT_EQ(center_update(start, Td({1, 2}, {5, 5}), 1.0).data(), start.data());
    EXPECT_THROW(center_update(start, Td::zeros({1, 3}), 0.9), ShapeError);
    EXPECT_THROW(center_update(start, Td::zeros({1, 2}), 1.5), std::invalid_argument);
}

TEST(Center, ConvergesGeometricallyToBatchMean) {
    Td c({3}, {0.0, 0.0, 0.0});
    const Td batch({2, 3}, {1.0, 2.0, -1.0, 1.0, 4.0, -3.0});
    const std::vector<double> mean{1.0, 3.0, -2.0};
    for (int i = 0; i < 100; ++i) c = center_update(c, batch, 0.9);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_LT(std::abs(c.data()[k] - mean[k]), std::abs(mean[k]) * std::pow(0.9, 100) + 1e-12);
}

ImageBatch<double> gradient_images(std::size_t n) {
    std::vector<double> px(n * 3 * 8 * 6);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::sin(0.37 * static_cast<double>(i));
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = 10 + i;
    return {Td({n, 3, 8, 6}, std::move(px)), ids};
}

TEST(Views, IdentityAugmentationReturnsInput) {
    const auto images = gradient_images(2);
    const auto [a, b] = make_views(images, AugmentConfig::identity(), 5);
    EXPECT_EQ(a.pixels.data(), images.pixels.data());
    EXPECT_EQ(b.pixels.data(), images.pixels.data());
    EXPECT_EQ(a.source_ids, images.source_ids);
}

TEST(Views, FlipReversesColumns) {
    const auto images = gradient_images(1);
    auto cfg = AugmentConfig::identity();
    cfg.flip_prob = 1.0;
    const auto [a, b] = make_views(images, cfg, 5);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t col = 0; col < 6; ++col)
                EXPECT_EQ(a.pixels.data()[(c * 8 + r) * 6 + col], images.pixels.data()[(c * 8 + r) * 6 + (5 - col)]);
}

TEST(Views, DeterministicAndIndependentPerView) {
    const auto images = gradient_images(3);
    const AugmentConfig cfg;
    const auto [a1, b1] = make_views(images, cfg, 42);
    const auto [a2, b2] = make_views(images, cfg, 42);
    EXPECT_EQ(a1.pixels.data(), a2.pixels.data());
    EXPECT_EQ(b1.pixels.data(), b2.pixels.data());
    EXPECT_NE(a1.pixels.data(), b1.pixels.data());
    const auto [a3, b3] = make_views(images, cfg, 43);
    EXPECT_NE(a1.pixels.data(), a3.pixels.data());
}

TEST(Views, DependOnSourceIdNotBatchPosition) {
    auto images = gradient_images(2);
    const AugmentConfig cfg;
    const auto [a, b] = make_views(images, cfg, 9);
    const std::size_t per = 3 * 8 * 6;
    std::vector<double> second(images.pixels.data().begin() + per, images.pixels.data().end());
    const ImageBatch<double> alone{Td({1, 3, 8, 6}, second), {images.source_ids[1]}};
    const auto [a1, b1] = make_views(alone, cfg, 9);
    EXPECT_TRUE(std::equal(a1.pixels.data().begin(), a1.pixels.data().end(), a.pixels.data().begin() + per));
}

TEST(Views, RejectsInvalidConfig) {
    AugmentConfig cfg;
    cfg.crop_min_scale = 0.0;
    EXPECT_THROW(make_views(gradient_images(1), cfg, 1), std::invalid_argument);
    cfg = {};
    cfg.flip_prob = 1.5;
    EXPECT_THROW(make_views(gradient_images(1), cfg, 1), std::invalid_argument);
}

}  // namespace
}  // namespace solider
