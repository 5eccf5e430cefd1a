#include <gtest/gtest.h>

#include <cmath>

#include "adk/losses.hpp"
#include "oracles.hpp"

using adk::Rng;
using adk::Tensor;
using namespace adk::losses;

namespace {

Tensor<double> rg(Tensor<double> t) {
  t.node_mut().requires_grad = true;
  return t;
}

}  // namespace

// --- noise_loss ----------------------------------------------------------------

TEST(NoiseLoss, AllAnomalousIsExactlyZero) {
  Rng rng(1, "nl");
  Tensor<double> es = adk::randn<double>(rng, {3, 1, 4, 4});
  Tensor<double> ps = adk::randn<double>(rng, es.shape());
  Tensor<double> eb = adk::randn<double>(rng, es.shape());
  Tensor<double> pb = adk::randn<double>(rng, es.shape());
  Tensor<double> l = noise_loss(es, ps, eb, pb, {1, 1, 1});
  EXPECT_EQ(l.item(), 0.0);
}

TEST(NoiseLoss, PerfectPredictionIsZero) {
  Rng rng(2, "nl2");
  Tensor<double> es = adk::randn<double>(rng, {2, 1, 4, 4});
  Tensor<double> eb = adk::randn<double>(rng, es.shape());
  Tensor<double> l = noise_loss(es, es, eb, eb, {0, 0});
  EXPECT_EQ(l.item(), 0.0);
}

TEST(NoiseLoss, HandArithmeticCase) {
  // single normal sample: error 1 everywhere at the small scale, 0 at the
  // large scale -> (1 + 0)/2 = 0.5
  Tensor<double> es = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  Tensor<double> ps = Tensor<double>::zeros(es.shape());
  Tensor<double> eb = Tensor<double>::full(es.shape(), 0.3);
  Tensor<double> l = noise_loss(es, ps, eb, eb, {0});
  EXPECT_DOUBLE_EQ(l.item(), 0.5);
}

TEST(NoiseLoss, AnomalousPredictionsNeverInfluenceValue) {
  Rng rng(3, "nl3");
  Tensor<double> es = adk::randn<double>(rng, {2, 1, 3, 3});
  Tensor<double> ps = adk::randn<double>(rng, es.shape());
  Tensor<double> eb = adk::randn<double>(rng, es.shape());
  Tensor<double> pb = adk::randn<double>(rng, es.shape());
  std::vector<int> labels{0, 1};
  const double before = noise_loss(es, ps, eb, pb, labels).item();
  // perturb the anomalous sample's predictions arbitrarily
  Tensor<double> ps2 = ps.clone();
  Tensor<double> pb2 = pb.clone();
  for (int j = 0; j < 9; ++j) {
    ps2.data_mut()[9 + j] += 100.0;
    pb2.data_mut()[9 + j] -= 42.0;
  }
  EXPECT_EQ(noise_loss(es, ps2, eb, pb2, labels).item(), before);
}

TEST(NoiseLoss, GradientMatchesFiniteDifferences) {
  Rng rng(4, "nl-fd");
  Tensor<double> es = adk::randn<double>(rng, {2, 1, 3, 3});
  Tensor<double> ps = rg(adk::randn<double>(rng, es.shape()));
  Tensor<double> eb = adk::randn<double>(rng, es.shape());
  Tensor<double> pb = rg(adk::randn<double>(rng, es.shape()));
  std::vector<int> labels{0, 1};
  auto res = oracle::grad_check(
      {ps, pb}, [&] { return noise_loss(es, ps, eb, pb, labels); });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(NoiseLoss, RejectsShapeMismatch) {
  Tensor<double> a = Tensor<double>::zeros({2, 1, 4, 4});
  Tensor<double> b = Tensor<double>::zeros({2, 1, 3, 3});
  EXPECT_THROW(noise_loss(a, b, a, a, {0, 0}), std::invalid_argument);
  EXPECT_THROW(noise_loss(a, a, a, a, {0}), std::invalid_argument);
}

// --- smooth_l1 -----------------------------------------------------------------

TEST(SmoothL1, PerfectPredictionIsZero) {
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {0, 1, 1, 0});
  EXPECT_EQ(smooth_l1(m, m.clone(), 1.0).item(), 0.0);
}

TEST(SmoothL1, HandArithmeticCase) {
  // |d| = 0.5 < 1.0 -> 0.5 * 0.25 / 1.0 = 0.125
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0});
  Tensor<double> p = Tensor<double>::from_vector({1, 1, 1, 1}, {0.5});
  EXPECT_DOUBLE_EQ(smooth_l1(m, p, 1.0).item(), 0.125);
}

TEST(SmoothL1, ContinuousAtTheKnot) {
  const double tr = 0.25;
  Tensor<double> m = Tensor<double>::from_vector({1}, {0.0});
  auto value = [&](double d) {
    Tensor<double> p = Tensor<double>::from_vector({1}, {-d});
    return smooth_l1(m, p, tr).item();
  };
  const double eps = 1e-9;
  EXPECT_NEAR(value(tr - eps), value(tr + eps), 1e-8);
  EXPECT_NEAR(value(tr), 0.5 * tr, 1e-12);
}

TEST(SmoothL1, GradientMatchesFiniteDifferences) {
  Rng rng(5, "sl1");
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {0, 1, 0, 1});
  Tensor<double> p = rg(adk::rand_uniform<double>(rng, {1, 1, 2, 2}, 0.05, 0.95));
  // also exercise the linear branch with a wide prediction
  auto res = oracle::grad_check({p}, [&] { return smooth_l1(m, p, 0.3); });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

// --- focal_loss -----------------------------------------------------------------

TEST(FocalLoss, ReducesToHalfBceAtZeroFocusing) {
  Rng rng(6, "fl");
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {1, 0, 1, 0});
  Tensor<double> p = adk::rand_uniform<double>(rng, m.shape(), 0.1, 0.9);
  const double got = focal_loss(m, p, 0.0, 0.5).item();
  double bce = 0;
  for (int i = 0; i < 4; ++i) {
    const double pt = m.data()[i] != 0 ? p.data()[i] : 1 - p.data()[i];
    bce += -std::log(pt);
  }
  bce /= 4;
  EXPECT_NEAR(got, 0.5 * bce, 1e-12);
}

TEST(FocalLoss, SaturatesAtConfidentCorrectPrediction) {
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0});
  Tensor<double> p = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0 - 1e-6});
  EXPECT_LT(focal_loss(m, p, 2.0, 0.75).item(), 1e-12);
}

TEST(FocalLoss, HandArithmeticCase) {
  // M=1, M_hat=0.5, focusing=2, alpha=0.75 -> -0.75 * 0.25 * log(0.5)
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0});
  Tensor<double> p = Tensor<double>::from_vector({1, 1, 1, 1}, {0.5});
  EXPECT_NEAR(focal_loss(m, p, 2.0, 0.75).item(), -0.75 * 0.25 * std::log(0.5), 1e-12);
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(7, "fl-fd");
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor<double> p = rg(adk::rand_uniform<double>(rng, m.shape(), 0.1, 0.9));
  auto res = oracle::grad_check({p}, [&] { return focal_loss(m, p, 2.0, 0.75); });
  EXPECT_LT(res.max_rel_err, 1e-4);
}

// --- mask_loss / total_loss --------------------------------------------------------

TEST(MaskLoss, GammaZeroIsSmoothL1Alone) {
  Rng rng(8, "ml");
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {0, 1, 1, 0});
  Tensor<double> p = adk::rand_uniform<double>(rng, m.shape(), 0.1, 0.9);
  LossWeights w;
  w.gamma = 0.0;
  EXPECT_DOUBLE_EQ(mask_loss(m, p, w).item(), smooth_l1(m, p, w.smooth_l1_transition).item());
}

TEST(MaskLoss, PaperGammaWeighting) {
  Rng rng(9, "ml2");
  Tensor<double> m = Tensor<double>::from_vector({1, 1, 2, 2}, {0, 0, 1, 1});
  Tensor<double> p = adk::rand_uniform<double>(rng, m.shape(), 0.1, 0.9);
  LossWeights w;  // gamma = 5 by default
  const double a = smooth_l1(m, p, w.smooth_l1_transition).item();
  const double b = focal_loss(m, p, w.focal_focusing, w.focal_alpha).item();
  EXPECT_NEAR(mask_loss(m, p, w).item(), a + 5.0 * b, 1e-12);
}

TEST(MaskLoss, RandomCompositionOracle) {
  Rng rng(10, "ml3");
  Tensor<double> m = Tensor<double>::zeros({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) m.data_mut()[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  Tensor<double> p = adk::rand_uniform<double>(rng, m.shape(), 0.05, 0.95);
  LossWeights w;
  w.gamma = 2.5;
  const double want = smooth_l1(m, p, w.smooth_l1_transition).item() +
                      w.gamma * focal_loss(m, p, w.focal_focusing, w.focal_alpha).item();
  EXPECT_NEAR(mask_loss(m, p, w).item(), want, 1e-12);
}

TEST(TotalLoss, Sums) {
  EXPECT_EQ(total_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(
      total_loss(Tensor<double>::scalar(0.5), Tensor<double>::scalar(0.3)).item(), 0.8);
}

TEST(TotalLoss, FullBatchCompositionOracle) {
  Rng rng(11, "tl");
  Tensor<double> es = adk::randn<double>(rng, {2, 1, 4, 4});
  Tensor<double> ps = adk::randn<double>(rng, es.shape());
  Tensor<double> eb = adk::randn<double>(rng, es.shape());
  Tensor<double> pb = adk::randn<double>(rng, es.shape());
  Tensor<double> m = Tensor<double>::from_vector({2, 1, 1, 1}, {1, 0});
  Tensor<double> mh = Tensor<double>::from_vector({2, 1, 1, 1}, {0.7, 0.2});
  LossWeights w;
  Tensor<double> nl = noise_loss(es, ps, eb, pb, {0, 1});
  Tensor<double> ml = mask_loss(m, mh, w);
  EXPECT_DOUBLE_EQ(total_loss(nl, ml).item(), nl.item() + ml.item());
}

// --- shared invariants ----------------------------------------------------------

TEST(LossInvariants, NonNegativeEverywhere) {
  Rng rng(12, "inv");
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> m = Tensor<double>::zeros({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) m.data_mut()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor<double> p = adk::rand_uniform<double>(rng, m.shape(), 0.0, 1.0);
    LossWeights w;
    EXPECT_GE(smooth_l1(m, p, w.smooth_l1_transition).item(), 0.0);
    EXPECT_GE(focal_loss(m, p, w.focal_focusing, w.focal_alpha).item(), 0.0);
    EXPECT_GE(mask_loss(m, p, w).item(), 0.0);
  }
}

TEST(LossInvariants, MaskLossGradientThroughSigmoidPipeline) {
  // gradient through a realistic path: logits -> sigmoid -> mask loss
  Rng rng(13, "inv2");
  Tensor<double> logits = rg(adk::randn<double>(rng, {1, 1, 3, 3}));
  Tensor<double> m = Tensor<double>::from_vector(
      {1, 1, 3, 3}, {1, 0, 0, 1, 1, 0, 0, 0, 1});
  LossWeights w;
  auto res = oracle::grad_check(
      {logits}, [&] { return mask_loss(m, adk::sigmoid(logits), w); });
  EXPECT_LT(res.max_rel_err, 1e-4);
}
