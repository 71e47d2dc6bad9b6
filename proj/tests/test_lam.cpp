#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "afss/lam.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace afss {
namespace {

using testing::gradient_error;
using testing::random_size;
using testing::random_tensor;

using VarF = Var<float>;
VarF cst(Tensor<float> t) { return VarF::constant(std::move(t)); }

Tensor<float> identity(std::size_t d) {
  Tensor<float> t({d, d});
  for (std::size_t i = 0; i < d; ++i) t[i * d + i] = 1;
  return t;
}

TEST(AdapterWeights, InitialisationShapes) {
  std::mt19937_64 rng(1);
  AdapterWeights<float> w(64, 16, 0.1f, rng, "pam");
  EXPECT_EQ(w.down.value().shape(), (Shape{64, 4}));
  EXPECT_EQ(w.up.value().shape(), (Shape{4, 64}));
  EXPECT_EQ(w.parameter_count(), 2u * 64 * 64 / 16);
  for (float v : w.up.value().values()) EXPECT_EQ(v, 0.0f);
  for (float v : w.down.value().values()) EXPECT_LE(std::abs(v), 1.0f / 8);
  EXPECT_EQ(w.down.name, "pam.w_down");
  EXPECT_THROW(AdapterWeights<float>(48, 32, 0.1f, rng, "x"), std::invalid_argument);
}

TEST(Adapt, ZeroUpProjectionGivesZero) {
  std::mt19937_64 rng(3);
  AdapterWeights<float> w(32, 16, 0.1f, rng, "pam");
  const auto f = random_tensor<float>({2, 32, 4, 4}, rng, -10, 10);
  const auto out = adapt(cst(f), w).value();
  for (float v : out.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Adapt, IdentityProjectionsGiveRelu) {
  std::mt19937_64 rng(5);
  const auto f = random_tensor<float>({1, 6, 3, 3}, rng);
  const auto out = adapt(cst(f), cst(identity(6)), cst(identity(6))).value();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out[i], std::max(0.0f, f[i]));
}

TEST(Adapt, DimensionMismatchIsAnError) {
  const auto f = cst(Tensor<float>({1, 8, 2, 2}));
  EXPECT_THROW(adapt(f, cst(Tensor<float>({6, 2})), cst(Tensor<float>({2, 8}))), ShapeError);
  EXPECT_THROW(adapt(f, cst(Tensor<float>({8, 2})), cst(Tensor<float>({3, 8}))), ShapeError);
  EXPECT_THROW(adapt(f, cst(Tensor<float>({8, 2})), cst(Tensor<float>({2, 6}))), ShapeError);
}

TEST(Adapt, ExactlyLinearInUpProjection) {
  std::mt19937_64 rng(7);
  const auto f = random_tensor<double>({1, 8, 3, 3}, rng);
  const auto wd = random_tensor<double>({8, 2}, rng);
  const auto u1 = random_tensor<double>({2, 8}, rng), u2 = random_tensor<double>({2, 8}, rng);
  const double a = 0.7, b = -1.9;
  Tensor<double> mix({2, 8});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * u1[i] + b * u2[i];
  auto run = [&](const Tensor<double>& u) {
    return adapt(Var<double>::constant(f), Var<double>::constant(wd), Var<double>::constant(u)).value();
  };
  const auto y1 = run(u1), y2 = run(u2), ym = run(mix);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], a * y1[i] + b * y2[i], 1e-12);
}

TEST(Inject, ZeroAdapterOrZeroBetaIsIdentity) {
  std::mt19937_64 rng(9);
  const auto f = random_tensor<float>({2, 4, 3, 3}, rng);
  const auto a = random_tensor<float>({2, 4, 3, 3}, rng);
  EXPECT_EQ(inject(cst(f), cst(Tensor<float>(f.shape())), 0.1f).value(), f);
  EXPECT_EQ(inject(cst(f), cst(a), 0.0f).value(), f);
}

TEST(Inject, FreshAdapterIsBitExactIdentityAtAnyBeta) {
  std::mt19937_64 rng(11);
  AdapterWeights<float> w(64, 16, 0.1f, rng, "pam");
  const auto f = random_tensor<float>({3, 64, 4, 4}, rng, -100, 100);
  for (float beta : {0.0f, 0.1f, 1.0f, 37.0f}) EXPECT_EQ(inject(cst(f), adapt(cst(f), w), beta).value(), f);
}

TEST(LamOracle, AdaptAndInjectOnRandomInstances) {
  std::mt19937_64 rng(127);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t gamma = std::size_t{1} << random_size(rng, 0, 3);
    const std::size_t d = gamma * random_size(rng, 1, 64 / gamma);
    const std::size_t n = random_size(rng, 1, 6), h = random_size(rng, 1, 16), w = random_size(rng, 1, 16);
    const auto f = random_tensor<float>({n, d, h, w}, rng);
    // weights at initialisation scale, 1/sqrt(fan-in), so outputs stay O(1)
    const double sd = 1 / std::sqrt(double(d)), su = 1 / std::sqrt(double(d / gamma));
    const auto wd = random_tensor<float>({d, d / gamma}, rng, -sd, sd);
    const auto wu = random_tensor<float>({d / gamma, d}, rng, -su, su);
    const auto a = adapt(cst(f), cst(wd), cst(wu)).value();
    const auto a_o = oracle::adapt(f, wd, wu);
    EXPECT_LE(oracle::max_abs_diff(a, a_o), 1e-6) << trial;
    const float beta = std::uniform_real_distribution<float>(0, 1)(rng);
    EXPECT_LE(oracle::max_abs_diff(inject(cst(f), cst(a), beta).value(), oracle::inject(oracle::to_vec(f), a_o, beta)),
              1e-6)
        << trial;
  }
}

TEST(LamGradients, InputsAndBothProjections) {
  std::mt19937_64 rng(13);
  for (std::size_t gamma : {1, 4}) {
    const std::size_t d = 8;
    auto f = Var<double>::leaf(random_tensor<double>({2, d, 3, 3}, rng), true);
    auto wd = Var<double>::leaf(random_tensor<double>({d, d / gamma}, rng), true);
    auto wu = Var<double>::leaf(random_tensor<double>({d / gamma, d}, rng), true);
    auto chain = [&] { return inject(f, adapt(f, wd, wu), 0.1); };
    EXPECT_LT(gradient_error(chain, {f, wd, wu}, rng), 1e-4) << gamma;
  }
}

TEST(LamGradients, ZeroUpProjectionStillReceivesGradient) {
  std::mt19937_64 rng(17);
  AdapterWeights<double> w(16, 4, 0.1, rng, "pam");
  auto f = Var<double>::constant(random_tensor<double>({1, 16, 3, 3}, rng));
  sum_all(inject(f, adapt(f, w), 0.1)).backward();
  double s = 0;
  for (double g : w.up.var.grad().values()) s += std::abs(g);
  EXPECT_GT(s, 0.0);
  // W_down's gradient flows through W_up, which is still zero.
  for (double g : w.down.var.grad().values()) EXPECT_EQ(g, 0.0);
}

}  // namespace
}  // namespace afss
