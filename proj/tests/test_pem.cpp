#include <gtest/gtest.h>

#include <random>

#include "afss/pem.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace afss {
namespace {

using testing::gradient_error;
using testing::random_size;
using testing::random_tensor;

using VarF = Var<float>;

VarF cst(Tensor<float> t) { return VarF::constant(std::move(t)); }

TEST(Similarity, ParallelOrthogonalAntiParallel) {
  // three positions: (2,0,0), (0,3,0), (-1,0,0) against p = (5,0,0)
  const Tensor<float> f({1, 3, 1, 3}, {2, 0, -1, 0, 3, 0, 0, 0, 0});
  const auto s = similarity_map(cst(f), cst(Tensor<float>({3}, {5, 0, 0}))).value();
  EXPECT_EQ(s.shape(), (Shape{1, 1, 3}));
  EXPECT_NEAR(s[0], 1.0f, 1e-7);
  EXPECT_NEAR(s[1], 0.0f, 1e-7);
  EXPECT_NEAR(s[2], -1.0f, 1e-7);
}

TEST(Similarity, ZeroPrototypeIsAnError) {
  EXPECT_THROW(similarity_map(cst(Tensor<float>({1, 2, 1, 1}, 1.0f)), cst(Tensor<float>({2}))), ZeroPrototypeError);
}

TEST(Enhancement, InteriorAndCeiling) {
  const auto one = cst(Tensor<float>({1, 1, 1}, 1.0f));
  EXPECT_FLOAT_EQ(enhancement_matrix(one, 4).value()[0], 2.0f);
  EXPECT_FLOAT_EQ(enhancement_matrix(one, 64).value()[0], 6.0f);
  const auto neg = cst(Tensor<float>({1, 1, 1}, -0.5f));
  for (std::size_t d : {1, 4, 16, 64}) EXPECT_EQ(enhancement_matrix(neg, d).value()[0], 0.0f);
}

TEST(Enhancement, StaysInClampRangeOnManyElements) {
  std::mt19937_64 rng(41);
  const auto s = random_tensor<float>({10, 100, 100}, rng, -1, 1);
  for (std::size_t d : {1, 16, 64}) {
    const auto e = enhancement_matrix(cst(s), d).value();
    for (float v : e.values()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 6.0f);
    }
  }
}

TEST(Enhance, ZeroMapIsIdentity) {
  std::mt19937_64 rng(43);
  const auto f = random_tensor<float>({2, 4, 3, 3}, rng);
  EXPECT_EQ(enhance(cst(f), cst(Tensor<float>({2, 3, 3}))).value(), f);
}

TEST(Enhance, SinglePositionScaledByOnePlusE) {
  std::mt19937_64 rng(47);
  const auto f = random_tensor<float>({1, 5, 2, 2}, rng);
  for (float e : {2.0f, 6.0f}) {
    Tensor<float> m({1, 2, 2});
    m.at(0, 1, 0) = e;
    const auto out = enhance(cst(f), cst(m)).value();
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) {
          const float expect = (y == 1 && x == 0) ? (e + 1) * f.at(0, c, y, x) : f.at(0, c, y, x);
          EXPECT_FLOAT_EQ(out.at(0, c, y, x), expect);
        }
  }
}

TEST(Enhance, PreservesSignAndBoundsMagnitude) {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor<float>({2, 16, 5, 5}, rng, -3, 3);
    const auto p = random_tensor<float>({16}, rng);
    const auto out = enhance(cst(f), enhancement_matrix(similarity_map(cst(f), cst(p)), 64)).value();
    float fmax = 0, omax = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_TRUE((f[i] > 0) == (out[i] > 0) || f[i] == 0) << i;
      EXPECT_GE(std::abs(out[i]), std::abs(f[i]));
      fmax = std::max(fmax, std::abs(f[i]));
      omax = std::max(omax, std::abs(out[i]));
    }
    EXPECT_LE(omax, 7 * fmax * (1 + 1e-6f));
  }
}

TEST(Enhance, ScaleFactorIsNondecreasingInSimilarity) {
  const std::size_t d = 16;
  float previous = -1;
  for (int i = -20; i <= 20; ++i) {
    const float s = static_cast<float>(i) / 20;
    const float e = enhancement_matrix(cst(Tensor<float>({1, 1, 1}, s)), d).value()[0];
    EXPECT_GE(1 + e, previous);
    previous = 1 + e;
  }
}

TEST(EnhancePair, IdenticalStreamsGiveIdenticalOutputs) {
  std::mt19937_64 rng(59);
  const auto f = random_tensor<float>({1, 8, 4, 4}, rng);
  const auto p = random_tensor<float>({8}, rng);
  const auto [s, q] = enhance_pair(cst(f), cst(f), cst(p));
  EXPECT_EQ(s.value(), q.value());
}

TEST(EnhancePair, OrthogonalPrototypeLeavesStreamsUnchanged) {
  std::mt19937_64 rng(61);
  auto fs = random_tensor<float>({2, 4, 3, 3}, rng), fq = random_tensor<float>({1, 4, 3, 3}, rng);
  for (auto* t : {&fs, &fq})
    for (std::size_t i = 0; i < t->size(); ++i)
      if ((i / 9) % 4 == 0) (*t)[i] = 0;  // channel 0 is empty everywhere
  const auto [s, q] = enhance_pair(cst(fs), cst(fq), cst(Tensor<float>({4}, {1, 0, 0, 0})));
  EXPECT_EQ(s.value(), fs);
  EXPECT_EQ(q.value(), fq);
}

TEST(EnhancePair, RejectsChannelMismatch) {
  EXPECT_THROW(enhance_pair(cst(Tensor<float>({1, 4, 2, 2}, 1)), cst(Tensor<float>({1, 3, 2, 2}, 1)),
                            cst(Tensor<float>({4}, 1))),
               ShapeError);
}

TEST(PemOracle, EachStepAndCompositionOnRandomInstances) {
  std::mt19937_64 rng(113);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t k = random_size(rng, 1, 5), d = random_size(rng, 1, 64);
    const std::size_t h = random_size(rng, 1, 16), w = random_size(rng, 1, 16);
    const auto fs = random_tensor<float>({k, d, h, w}, rng);
    const auto fq = random_tensor<float>({1, d, h, w}, rng);
    auto p = random_tensor<float>({d}, rng);
    const auto pv = oracle::to_vec(p);

    const auto sim = similarity_map(cst(fs), cst(p)).value();
    const auto sim_o = oracle::similarity(fs, pv);
    EXPECT_LE(oracle::max_abs_diff(sim, sim_o), 1e-6) << trial;

    const auto e = enhancement_matrix(cst(sim), d).value();
    const auto e_o = oracle::enhancement(oracle::to_vec(sim), d);
    EXPECT_LE(oracle::max_abs_diff(e, e_o), 1e-6) << trial;

    EXPECT_LE(oracle::max_abs_diff(enhance(cst(fs), cst(e)).value(), oracle::enhance(fs, oracle::to_vec(e))), 1e-6)
        << trial;

    const auto [s, q] = enhance_pair(cst(fs), cst(fq), cst(p));
    const auto s_o = oracle::enhance(fs, oracle::enhancement(oracle::similarity(fs, pv), d));
    const auto q_o = oracle::enhance(fq, oracle::enhancement(oracle::similarity(fq, pv), d));
    // composed in double end to end, so allow float rounding of the ~7x scaled values
    EXPECT_LE(oracle::max_abs_diff(s.value(), s_o), 1e-5) << trial;
    EXPECT_LE(oracle::max_abs_diff(q.value(), q_o), 1e-5) << trial;
  }
}

// Inputs whose scaled similarity sits near 0 or 6 are nudged off the kinks.
bool near_kink(const Tensor<double>& f, const Tensor<double>& p, std::size_t d) {
  for (double s : oracle::similarity(f, oracle::to_vec(p))) {
    const double x = s * std::sqrt(double(d));
    if (std::abs(x) < 1e-3 || std::abs(x - 6) < 1e-3) return true;
  }
  return false;
}

TEST(PemGradients, ThroughFeaturesAndPrototype) {
  std::mt19937_64 rng(67);
  for (std::size_t d : {4, 64}) {
    Tensor<double> fv, pv;
    do {
      fv = random_tensor<double>({2, d, 3, 3}, rng);
      pv = random_tensor<double>({d}, rng);
    } while (near_kink(fv, pv, d));
    auto f = Var<double>::leaf(fv, true);
    auto p = Var<double>::leaf(pv, true);
    auto chain = [&] { return enhance(f, enhancement_matrix(similarity_map(f, p), d)); };
    EXPECT_LT(gradient_error(chain, {f, p}, rng), 1e-4) << d;
    auto e = Var<double>::leaf(random_tensor<double>({2, 3, 3}, rng, 0, 6), true);
    EXPECT_LT(gradient_error([&] { return enhance(f, e); }, {f, e}, rng), 1e-6);
  }
}

}  // namespace
}  // namespace afss
