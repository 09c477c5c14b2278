#include <sattca/objective.hpp>
#include <sattca/segnet.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace sattca;

namespace {

Volume<double> constant(Dims3 d, double v) { return Volume<double>(d, isotropic_mm(), v); }

Volume<double> random_probs(std::mt19937_64& rng, Dims3 d) {
  std::uniform_real_distribution<double> u(0.02, 0.98);
  Volume<double> p(d, isotropic_mm());
  for (Eigen::Index i = 0; i < p.voxels().size(); ++i) p.voxels()[i] = u(rng);
  return p;
}

BinaryMask3D random_target(std::mt19937_64& rng, Dims3 d) {
  std::bernoulli_distribution b(0.3);
  BinaryMask3D m(d);
  for (std::size_t i = 0; i < m.size(); ++i) m.bits()[static_cast<Eigen::Index>(i)] = b(rng);
  return m;
}

}  // namespace

TEST(Losses, HalfProbabilityGivesLogTwo) {
  const Dims3 d{2, 3, 4};
  BinaryMask3D t(d);
  t.set(0, 1, 2);
  EXPECT_NEAR(bce(constant(d, 0.5), t), std::log(2.0), 1e-12);
  EXPECT_NEAR(entropy(constant(d, 0.5)), std::log(2.0), 1e-12);
}

TEST(Losses, WeightedSum) {
  EXPECT_EQ(combine_tt({0.2, 0.4, 0.1}, LossWeights{}), 0.5);
  LossWeights w;
  w.sigma = 2.0;
  w.gamma = 0.0;
  EXPECT_DOUBLE_EQ(combine_tt({0.2, 0.4, 0.1}, w), 1.0);
}

TEST(Losses, DiceOnHandCase) {
  const Dims3 d{1, 1, 4};
  Volume<double> p(d, isotropic_mm());
  p.voxels() << 1.0, 0.5, 0.0, 0.0;
  BinaryMask3D t(d);
  t.set(0, 0, 0);
  t.set(0, 0, 2);
  const double eps = 1e-5;
  EXPECT_NEAR(soft_dice(p, t), 1.0 - (2.0 * 1.0 + eps) / (1.5 + 2.0 + eps), 1e-15);
}

TEST(Losses, ClampKeepsLogsFinite) {
  const Dims3 d{1, 1, 2};
  Volume<double> p(d, isotropic_mm());
  p.voxels() << 0.0, 1.0;
  BinaryMask3D t(d);
  t.set(0, 0, 0);
  const double v = bce(p, t);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -0.5 * (std::log(1e-7) + std::log(1e-7)), 1e-9);
  EXPECT_LT(entropy(p), 1e-5);
}

TEST(Losses, MaskedPredictionZeroesOutsideTheMask) {
  const Dims3 d{1, 2, 2};
  Volume<double> p(d, isotropic_mm(), 0.7);
  BinaryMask3D m(d);
  m.set(0, 1, 1);
  const auto q = masked_prediction(p, m);
  EXPECT_EQ(q.voxels().sum(), 0.7);
  EXPECT_THROW(masked_prediction(p, BinaryMask3D(Dims3{1, 1, 1})), std::invalid_argument);
}

TEST(LossGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  const Dims3 d{2, 3, 3};
  for (int it = 0; it < 10; ++it) {
    const auto p = random_probs(rng, d);
    const auto m = random_target(rng, d);
    const auto gt = tt_loss_grad(p, m);
    const auto gs = train_loss_grad(p, m);
    for (Eigen::Index i = 0; i < p.voxels().size(); ++i) {
      auto hi = p, lo = p;
      const double h = 1e-6;
      hi.voxels()[i] += h;
      lo.voxels()[i] -= h;
      EXPECT_NEAR(gt.voxels()[i], (tt_loss(hi, m) - tt_loss(lo, m)) / (2 * h), 1e-6);
      EXPECT_NEAR(gs.voxels()[i], (train_loss(hi, m) - train_loss(lo, m)) / (2 * h), 1e-6);
    }
  }
}

TEST(LossGradients, ChainThroughSigmoid) {
  const Dims3 d{1, 1, 3};
  Volume<double> z(d, isotropic_mm());
  z.voxels() << -1.0, 0.3, 2.0;
  BinaryMask3D m(d);
  m.set(0, 0, 1);
  auto loss_of = [&](const Volume<double>& zz) { return tt_loss(sigmoid(zz), m); };
  const auto p = sigmoid(z);
  const auto g = chain_sigmoid(tt_loss_grad(p, m), p);
  for (Eigen::Index i = 0; i < 3; ++i) {
    auto hi = z, lo = z;
    hi.voxels()[i] += 1e-6;
    lo.voxels()[i] -= 1e-6;
    EXPECT_NEAR(g.voxels()[i], (loss_of(hi) - loss_of(lo)) / 2e-6, 1e-7);
  }
}
