#include "deft/models.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

namespace deft {
namespace {

TEST(BlockQuadratic, ZeroGradientAtOptimumWithoutNoise) {
    BlockQuadraticParams p;
    p.noise = 0.0;
    const BlockQuadratic m(p, 3);
    auto rng = make_rng(3, 1);
    GradientVector g(m.layout().n_g(), 1.0);
    m.gradient(m.optimum(), rng, g);
    for (double v : g) ASSERT_EQ(v, 0.0);
    EXPECT_EQ(m.evaluate(m.optimum()).loss, 0.0);
}

TEST(BlockQuadratic, GradientScalesWithCurvature) {
    BlockQuadraticParams p;
    p.tensor_sizes = {50, 50};
    p.block_scales = {8.0, 1.0};
    p.noise = 0.0;
    const BlockQuadratic m(p, 9);
    GradientVector x = m.optimum();
    for (std::size_t i = 0; i < 50; ++i) {
        const double delta = 0.01 * static_cast<double>(i + 1);
        x[i] += delta;
        x[50 + i] += delta;
    }
    auto rng = make_rng(9, 1);
    GradientVector g(100);
    m.gradient(x, rng, g);
    const double n8 = l2_norm(std::span<const double>(g).subspan(0, 50));
    const double n1 = l2_norm(std::span<const double>(g).subspan(50, 50));
    EXPECT_NEAR(n8 / n1, 8.0, 1e-12);
}

TEST(BlockQuadratic, RejectsBadParameters) {
    BlockQuadraticParams p;
    p.block_scales = {1.0};
    EXPECT_THROW(BlockQuadratic(p, 0), std::invalid_argument);
    p.block_scales = {1.0, 1.0, 0.0, 1.0};
    EXPECT_THROW(BlockQuadratic(p, 0), std::invalid_argument);
}

TEST(BlockQuadratic, NoiseComesFromCallerStream) {
    const BlockQuadratic m(BlockQuadraticParams{}, 1);
    const auto x = m.initial_parameters(1);
    GradientVector a(x.size()), b(x.size()), c(x.size());
    auto r1 = make_rng(1, 1, 4), r2 = make_rng(1, 1, 4), r3 = make_rng(1, 2, 4);
    m.gradient(x, r1, a);
    m.gradient(x, r2, b);
    m.gradient(x, r3, c);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(Mlp, LayoutAndDeterministicData) {
    MlpParams p;
    p.inputs = 4;
    p.hidden = 3;
    p.classes = 2;
    const Mlp a(p, 5), b(p, 5);
    EXPECT_EQ(a.layout().tensor_sizes(), (std::vector<std::size_t>{12, 3, 6, 2}));
    EXPECT_TRUE(std::equal(a.features().begin(), a.features().end(), b.features().begin()));
}

// Central differences on batch_loss at eps = 1e-6 for 20 random coordinates.
void check_finite_differences(Activation act, std::uint64_t seed) {
    MlpParams p;
    p.inputs = 8;
    p.hidden = 12;
    p.classes = 3;
    p.activation = act;
    p.dataset_size = 64;
    p.batch_size = 16;
    const Mlp m(p, seed);
    auto x = m.initial_parameters(seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& v : x) v += nd(rng);  // move biases off zero
    auto batch_rng = make_rng(seed, 7);
    const auto batch = m.sample_batch(batch_rng);
    GradientVector g(x.size());
    m.batch_gradient(x, batch, g);

    const double eps = 1e-6;
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    for (int c = 0; c < 20; ++c) {
        const std::size_t j = pick(rng);
        auto xp = x, xm = x;
        xp[j] += eps;
        xm[j] -= eps;
        const double fd = (m.batch_loss(xp, batch) - m.batch_loss(xm, batch)) / (2.0 * eps);
        const double scale = std::max({std::fabs(fd), std::fabs(g[j]), 1e-3});
        EXPECT_LE(std::fabs(fd - g[j]) / scale, 1e-5) << "coordinate " << j << " analytic " << g[j] << " fd " << fd;
    }
}

TEST(Mlp, GradientMatchesFiniteDifferencesTanh) { check_finite_differences(Activation::tanh, 21); }

TEST(Mlp, GradientMatchesFiniteDifferencesRelu) { check_finite_differences(Activation::relu, 22); }

TEST(Mlp, EvaluateReportsAccuracy) {
    const Mlp m(MlpParams{}, 2);
    const auto e = m.evaluate(m.initial_parameters(2));
    ASSERT_TRUE(e.accuracy.has_value());
    EXPECT_GE(*e.accuracy, 0.0);
    EXPECT_LE(*e.accuracy, 1.0);
    EXPECT_GT(e.loss, 0.0);
}

TEST(Models, NonFiniteGradientIsAnError) {
    BlockQuadraticParams p;
    p.noise = 0.0;
    const BlockQuadratic m(p, 1);
    auto x = m.initial_parameters(1);
    x[17] = INFINITY;
    auto rng = make_rng(1, 1);
    GradientVector g(x.size());
    EXPECT_THROW(m.gradient(x, rng, g), NonFiniteError);
}

}  // namespace
}  // namespace deft
