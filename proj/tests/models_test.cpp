#include <gtest/gtest.h>

#include <cmath>

#include "adk/models.hpp"
#include "oracles.hpp"

using adk::DenoiserConfig;
using adk::ModelBundle;
using adk::Rng;
using adk::SegmenterConfig;
using adk::Tensor;

namespace {

// Small configs keep the finite-difference probes fast.
DenoiserConfig tiny_denoiser(int channels = 1) {
  DenoiserConfig c;
  c.in_channels = channels;
  c.base_channels = 8;
  c.depth = 1;
  c.time_embed_dim = 16;
  c.attention_at_lowest = true;
  return c;
}

SegmenterConfig tiny_segmenter(int channels = 1) {
  SegmenterConfig c;
  c.in_channels = 2 * channels;
  c.base_channels = 8;
  c.depth = 1;
  return c;
}

template <typename T>
ModelBundle<T> tiny_bundle(std::uint64_t seed = 1, int channels = 1) {
  Rng rng(seed, "bundle");
  return ModelBundle<T>::create(tiny_denoiser(channels), tiny_segmenter(channels), rng);
}

}  // namespace

// --- time_embedding -----------------------------------------------------------

TEST(TimeEmbedding, ZeroTimestep) {
  Tensor<float> e = adk::time_embedding<float>(0, 8);
  for (int k = 0; k < 4; ++k) {
    EXPECT_FLOAT_EQ(e.data()[2 * k], 0.0f);
    EXPECT_FLOAT_EQ(e.data()[2 * k + 1], 1.0f);
  }
}

TEST(TimeEmbedding, EntriesBounded) {
  for (int t : {1, 17, 999}) {
    Tensor<double> e = adk::time_embedding<double>(t, 32);
    for (double v : e.data()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(TimeEmbedding, MatchesDirectFormulaOracle) {
  const int dim = 4, t = 1;
  Tensor<double> e = adk::time_embedding<double>(t, dim);
  // w_0 = 1, w_1 = 10000^(-2/4) = 1e-2
  EXPECT_NEAR(e.data()[0], std::sin(1.0), 1e-15);
  EXPECT_NEAR(e.data()[1], std::cos(1.0), 1e-15);
  EXPECT_NEAR(e.data()[2], std::sin(1e-2), 1e-15);
  EXPECT_NEAR(e.data()[3], std::cos(1e-2), 1e-15);
}

TEST(TimeEmbedding, RejectsOddDim) {
  EXPECT_THROW(adk::time_embedding<float>(1, 5), std::invalid_argument);
}

// --- denoiser -------------------------------------------------------------------

TEST(Denoiser, ZeroInitializedHeadPredictsZeroNoise) {
  auto bundle = tiny_bundle<float>();
  Rng rng(2, "x");
  Tensor<float> x = adk::randn<float>(rng, {2, 1, 8, 8});
  std::vector<int> ts{3, 500};
  Tensor<float> eps = bundle.denoise(x, ts);
  ASSERT_EQ(eps.shape(), x.shape());
  for (float v : eps.data()) ASSERT_EQ(v, 0.0f);
}

TEST(Denoiser, BatchMatchesPerSampleForwardBitwise) {
  auto bundle = tiny_bundle<float>(7);
  // make the network non-trivial: nudge the output head off zero
  for (auto& [name, p] : bundle.named_params())
    if (name.find("conv_out.weight") != std::string::npos)
      for (auto& v : p.data_mut()) v = 0.01f;
  Rng rng(3, "batch");
  Tensor<float> x = adk::randn<float>(rng, {2, 1, 8, 8});
  std::vector<int> ts{11, 421};
  Tensor<float> both = bundle.denoise(x, ts);
  for (int i = 0; i < 2; ++i) {
    std::vector<float> single(x.data().begin() + i * 64, x.data().begin() + (i + 1) * 64);
    Tensor<float> xi = Tensor<float>::from_vector({1, 1, 8, 8}, std::move(single));
    std::vector<int> ti{ts[static_cast<std::size_t>(i)]};
    Tensor<float> yi = bundle.denoise(xi, ti);
    for (int j = 0; j < 64; ++j)
      ASSERT_EQ(yi.data()[j], both.data()[i * 64 + j]) << "sample " << i << " px " << j;
  }
}

TEST(Denoiser, RejectsIndivisibleSpatialDims) {
  auto bundle = tiny_bundle<float>();
  Tensor<float> x = Tensor<float>::zeros({1, 1, 7, 8});
  std::vector<int> ts{0};
  EXPECT_THROW(bundle.denoise(x, ts), std::invalid_argument);
}

TEST(Denoiser, GradientMatchesFiniteDifferences) {
  // 64-bit probe on a random subset of parameters of every layer family
  Rng rng(5, "fd");
  auto bundle = tiny_bundle<double>(5);
  Rng xr(6, "fd-x");
  Tensor<double> x = adk::randn<double>(xr, {1, 1, 8, 8});
  std::vector<int> ts{42};
  auto build = [&] { return adk::mean(adk::square(bundle.denoise(x, ts))); };

  adk::Tensor<double> loss = build();
  auto params = bundle.params();
  auto grads = adk::gradient(loss, params);
  auto eval = [&] { return build().item(); };
  Rng pick(7, "pick");
  int checked = 0;
  double max_rel = 0;
  for (std::size_t pi = 0; pi < params.size(); pi += 3) {
    std::size_t n = params[pi].data().size();
    std::size_t j = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    double analytic = grads[pi].data()[j];
    double numeric = oracle::fd_partial(eval, params[pi], j, 1e-5);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    ++checked;
  }
  EXPECT_GT(checked, 10);
  EXPECT_LT(max_rel, 1e-4);
}

// --- segmenter --------------------------------------------------------------------

TEST(Segmenter, OutputBoundedAndSingleChannel) {
  auto bundle = tiny_bundle<float>(9);
  for (auto& [name, p] : bundle.named_params())
    if (name.find("segmenter") == 0 && name.find("conv_out") != std::string::npos)
      for (auto& v : p.data_mut()) v = 0.05f;
  Rng rng(10, "seg");
  Tensor<float> x0 = adk::randn<float>(rng, {2, 1, 8, 8});
  Tensor<float> xr = adk::randn<float>(rng, {2, 1, 8, 8});
  Tensor<float> m = bundle.segment(x0, xr);
  ASSERT_EQ(m.shape(), (adk::Shape{2, 1, 8, 8}));
  for (float v : m.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

TEST(Segmenter, PermutingBatchPermutesOutputs) {
  auto bundle = tiny_bundle<float>(11);
  Rng rng(12, "perm");
  Tensor<float> x0 = adk::randn<float>(rng, {2, 1, 8, 8});
  Tensor<float> xr = adk::randn<float>(rng, {2, 1, 8, 8});
  Tensor<float> fwd = bundle.segment(x0, xr);
  // swap the two samples
  auto swap_batch = [](const Tensor<float>& t) {
    std::vector<float> v(t.data().begin(), t.data().end());
    std::vector<float> sw(v.size());
    std::copy(v.begin() + 64, v.end(), sw.begin());
    std::copy(v.begin(), v.begin() + 64, sw.begin() + 64);
    return Tensor<float>::from_vector(t.shape(), std::move(sw));
  };
  Tensor<float> rev = bundle.segment(swap_batch(x0), swap_batch(xr));
  for (int j = 0; j < 64; ++j) {
    ASSERT_EQ(rev.data()[j], fwd.data()[64 + j]);
    ASSERT_EQ(rev.data()[64 + j], fwd.data()[j]);
  }
}

TEST(Segmenter, RejectsShapeMismatch) {
  auto bundle = tiny_bundle<float>();
  Tensor<float> a = Tensor<float>::zeros({1, 1, 8, 8});
  Tensor<float> b = Tensor<float>::zeros({1, 1, 16, 16});
  EXPECT_THROW(bundle.segment(a, b), std::invalid_argument);
}

TEST(Segmenter, GradientMatchesFiniteDifferences) {
  auto bundle = tiny_bundle<double>(13);
  Rng rng(14, "seg-fd");
  Tensor<double> x0 = adk::randn<double>(rng, {1, 1, 8, 8});
  Tensor<double> xr = adk::randn<double>(rng, {1, 1, 8, 8});
  auto build = [&] { return adk::mean(adk::square(bundle.segment(x0, xr))); };
  auto params = bundle.params();
  auto grads = adk::gradient(build(), params);
  auto eval = [&] { return build().item(); };
  Rng pick(15, "pick");
  double max_rel = 0;
  for (std::size_t pi = 0; pi < params.size(); pi += 4) {
    if (params[pi].data().empty()) continue;
    std::size_t j = static_cast<std::size_t>(
        pick.uniform_int(0, static_cast<std::int64_t>(params[pi].data().size()) - 1));
    double analytic = grads[pi].data()[j];
    double numeric = oracle::fd_partial(eval, params[pi], j, 1e-5);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
  }
  EXPECT_LT(max_rel, 1e-4);
}

// --- bundle / checkpoint -------------------------------------------------------------

TEST(ModelBundle, CheckpointRoundTripPreservesForward) {
  auto bundle = tiny_bundle<float>(20);
  for (auto& [name, p] : bundle.named_params())
    if (name.find("conv_out.weight") != std::string::npos)
      for (auto& v : p.data_mut()) v = 0.02f;
  Rng rng(21, "ckpt");
  Tensor<float> x = adk::randn<float>(rng, {1, 1, 8, 8});
  std::vector<int> ts{7};
  Tensor<float> before = bundle.denoise(x, ts);
  std::string path = testing::TempDir() + "/bundle.ckpt";
  bundle.save(path);
  auto loaded = ModelBundle<float>::load(path, tiny_denoiser(), tiny_segmenter());
  Tensor<float> after = loaded.denoise(x, ts);
  for (std::int64_t i = 0; i < before.numel(); ++i)
    ASSERT_EQ(before.data()[i], after.data()[i]);
}

TEST(ModelBundle, LoadRejectsMismatchedConfig) {
  auto bundle = tiny_bundle<float>(22);
  std::string path = testing::TempDir() + "/bundle2.ckpt";
  bundle.save(path);
  DenoiserConfig wrong = tiny_denoiser();
  wrong.base_channels = 16;
  EXPECT_THROW(ModelBundle<float>::load(path, wrong, tiny_segmenter()),
               std::runtime_error);
}

TEST(ModelBundle, DenoiserHandleCountsForwards) {
  auto bundle = tiny_bundle<float>(23);
  adk::Denoiser<float> handle = bundle.denoiser_handle();
  Rng rng(24, "hc");
  Tensor<float> x = adk::randn<float>(rng, {1, 1, 8, 8});
  std::vector<int> ts{5};
  for (int i = 0; i < 3; ++i) handle(x, ts);
  EXPECT_EQ(handle.calls(), 3);
  handle.reset_calls();
  EXPECT_EQ(handle.calls(), 0);
}

TEST(ModelBundle, ParamsAllFiniteAfterInit) {
  auto bundle = tiny_bundle<double>(25);
  EXPECT_TRUE(bundle.all_finite());
}
