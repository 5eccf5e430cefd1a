#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adk/adam.hpp"
#include "adk/losses.hpp"
#include "adk/metrics.hpp"
#include "adk/models.hpp"
#include "adk/rng.hpp"
#include "adk/schedule.hpp"
#include "adk/synth.hpp"
#include "adk/tensor.hpp"

namespace adk::pipeline {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  int normals_per_batch = 8;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  bool detach_reconstruction = true;  // segmenter sees xhat0_g as a constant
  double w = 1.0;                     // guidance scale
  int t_s_infer = 100;                // fixed inference timesteps
  int t_b_infer = 500;
  int top_k = 50;                     // image score: mean of the K highest pixels
  int bench_t_start = 400;            // iterative paradigm depth in the benchmark

  void validate(const NoiseSchedule& sched) const {
    if (batch_size < 1 || normals_per_batch < 0 || normals_per_batch > batch_size)
      throw std::invalid_argument("TrainConfig: need 0 <= normals-per-batch <= batch-size");
    if (!(0 <= t_s_infer && t_s_infer <= sched.tau && sched.tau < t_b_infer &&
          t_b_infer < sched.T))
      throw std::invalid_argument("TrainConfig: need 0 <= t_s <= tau < t_b < T");
    if (top_k < 1) throw std::invalid_argument("TrainConfig: K must be >= 1");
    if (bench_t_start < 1 || bench_t_start >= sched.T)
      throw std::invalid_argument("TrainConfig: bench t_start must lie in [1,T)");
  }
};

template <typename T>
struct TrainBatch {
  Tensor<T> images;  // [N,C,H,W]
  Tensor<T> masks;   // [N,1,H,W], {0,1}
  std::vector<int> labels;
};

struct LossBreakdown {
  double noise = 0;
  double mask = 0;
  double total = 0;
};

class TrainDivergedError : public std::runtime_error {
 public:
  TrainDivergedError(LossBreakdown at, std::int64_t step)
      : std::runtime_error("training diverged at step " + std::to_string(step) +
                           " (noise=" + std::to_string(at.noise) +
                           " mask=" + std::to_string(at.mask) + ")"),
        losses(at),
        step(step) {}
  LossBreakdown losses;
  std::int64_t step = 0;
};

// Mean of the K largest heatmap values; K is clamped to the pixel count.
template <typename T>
double top_k_mean(const Tensor<T>& heatmap, int k) {
  if (k < 1) throw std::invalid_argument("top_k_mean: K must be >= 1");
  std::vector<T> values(heatmap.data().begin(), heatmap.data().end());
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), values.size());
  std::partial_sort(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(kk),
                    values.end(), std::greater<T>());
  double acc = 0;
  for (std::size_t i = 0; i < kk; ++i) acc += static_cast<double>(values[i]);
  return acc / static_cast<double>(kk);
}

// Stacks [1,C,H,W] samples into one [N,C,H,W] batch tensor.
template <typename T>
Tensor<T> stack_images(std::span<const Tensor<T>> images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& one = images[0].shape();
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(images[0].numel()) * images.size());
  for (const auto& img : images) {
    if (img.shape() != one)
      throw std::invalid_argument("stack_images: mixed sample shapes");
    data.insert(data.end(), img.data().begin(), img.data().end());
  }
  Shape shape = one;
  shape[0] = static_cast<std::int64_t>(images.size());
  return Tensor<T>::from_vector(std::move(shape), std::move(data));
}

// Training batch: `normals_per_batch` untouched normal images (y=0, empty
// mask) followed by synthetic anomalous samples drawn through the synthesis
// pipeline with per-sample rng streams.
template <typename T>
TrainBatch<T> assemble_batch(std::span<const Tensor<T>> normal_pool,
                             const synth::SynthParams& params,
                             const synth::TextureCorpus<T>* corpus, int batch_size,
                             int normals_per_batch, Rng& rng) {
  if (normal_pool.empty()) throw std::invalid_argument("assemble_batch: empty pool");
  if (normals_per_batch > batch_size)
    throw std::invalid_argument("assemble_batch: normals exceed batch size");
  const int h = static_cast<int>(normal_pool[0].dim(2));
  const int w = static_cast<int>(normal_pool[0].dim(3));
  std::vector<Tensor<T>> images;
  std::vector<Tensor<T>> masks;
  std::vector<int> labels;
  auto pick = [&](Rng& r) {
    return normal_pool[static_cast<std::size_t>(
        r.uniform_int(0, static_cast<std::int64_t>(normal_pool.size()) - 1))];
  };
  for (int i = 0; i < normals_per_batch; ++i) {
    images.push_back(pick(rng));
    masks.push_back(Tensor<T>::zeros({1, 1, h, w}));
    labels.push_back(0);
  }
  for (int i = normals_per_batch; i < batch_size; ++i) {
    Rng sample_rng = rng.fork("synth-" + std::to_string(i));
    Tensor<T> base = pick(rng);
    synth::SynthSample<T> s = synth::make_synth_sample(base, params, corpus, sample_rng);
    images.push_back(s.image);
    masks.push_back(s.mask.template to_tensor<T>());
    labels.push_back(s.label);
  }
  return TrainBatch<T>{stack_images<T>(images), stack_images<T>(masks), std::move(labels)};
}

template <typename T>
struct LossTensors {
  Tensor<T> noise;
  Tensor<T> mask;
  Tensor<T> total;
};

// Joint training (one Adam step over both sub-networks per batch). Per
// sample: corrupt at a random small and a random large timestep, predict
// both noises, take the gated noise loss, rebuild the norm-guided one-step
// reconstruction from those same predictions, and score it with the
// segmenter against the ground-truth mask.
template <typename T>
class Trainer {
 public:
  Trainer(ModelBundle<T>& bundle, NoiseSchedule sched, losses::LossWeights weights,
          TrainConfig config)
      : bundle_(bundle),
        sched_(std::move(sched)),
        weights_(weights),
        config_(config),
        params_(bundle.params()),
        optimizer_(params_, AdamConfig<T>{static_cast<T>(config.learning_rate)}) {
    weights_.validate();
    config_.validate(sched_);
  }

  const TrainConfig& config() const { return config_; }
  std::int64_t step_count() const { return optimizer_.step_count(); }

  // Forward pass and losses only; the graph is live on the returned tensors.
  LossTensors<T> compute_losses(const TrainBatch<T>& batch, Rng& rng) {
    const std::int64_t n = batch.images.dim(0);
    if (n != static_cast<std::int64_t>(batch.labels.size()) || n != batch.masks.dim(0))
      throw std::invalid_argument("train: batch images/masks/labels must align");
    std::vector<int> ts(static_cast<std::size_t>(n)), tb(static_cast<std::size_t>(n));
    for (auto& t : ts) t = static_cast<int>(rng.uniform_int(0, sched_.tau));
    for (auto& t : tb) t = static_cast<int>(rng.uniform_int(sched_.tau + 1, sched_.T - 1));
    Tensor<T> eps_s = randn<T>(rng, batch.images.shape());
    Tensor<T> eps_b = randn<T>(rng, batch.images.shape());
    Tensor<T> x_ts = forward_diffuse(batch.images, std::span<const int>(ts), eps_s, sched_);
    Tensor<T> x_tb = forward_diffuse(batch.images, std::span<const int>(tb), eps_b, sched_);
    Tensor<T> eps_pred_s = bundle_.denoise(x_ts, ts);
    Tensor<T> eps_pred_b = bundle_.denoise(x_tb, tb);
    Tensor<T> l_noise =
        losses::noise_loss(eps_s, eps_pred_s, eps_b, eps_pred_b, batch.labels);
    Tensor<T> ps = config_.detach_reconstruction ? eps_pred_s.detach() : eps_pred_s;
    Tensor<T> pb = config_.detach_reconstruction ? eps_pred_b.detach() : eps_pred_b;
    Tensor<T> recon = norm_guided_core(std::move(x_ts), std::move(x_tb), std::move(ps),
                                       std::move(pb), ts, tb, config_.w, sched_);
    Tensor<T> scores = bundle_.segment(batch.images, std::move(recon));
    Tensor<T> l_mask = losses::mask_loss(batch.masks, std::move(scores), weights_);
    Tensor<T> l_total = losses::total_loss(l_noise, l_mask);
    return {std::move(l_noise), std::move(l_mask), std::move(l_total)};
  }

  LossBreakdown step(const TrainBatch<T>& batch, Rng& rng) {
    LossTensors<T> l = compute_losses(batch, rng);
    LossBreakdown out{static_cast<double>(l.noise.item()),
                      static_cast<double>(l.mask.item()),
                      static_cast<double>(l.total.item())};
    if (!std::isfinite(out.total))
      throw TrainDivergedError(out, optimizer_.step_count() + 1);
    auto grads = gradient(l.total, std::span<const Tensor<T>>(params_));
    optimizer_.step(grads);
    return out;
  }

 private:
  ModelBundle<T>& bundle_;
  NoiseSchedule sched_;
  losses::LossWeights weights_;
  TrainConfig config_;
  std::vector<Tensor<T>> params_;
  Adam<T> optimizer_;
};

template <typename T>
struct InferenceResult {
  Tensor<T> reconstruction;  // [1,C,H,W]
  Tensor<T> heatmap;         // [1,1,H,W] in [0,1]
  double image_score = 0;
  int forwards_used = 0;      // denoiser + segmenter forwards
  int denoiser_forwards = 0;  // reconstruction cost alone
  double wall_seconds = 0;
};

// Fixed-timestep norm-guided one-step inference: two denoiser forwards, one
// segmenter forward, top-K image score.
template <typename T>
InferenceResult<T> infer(const ModelBundle<T>& bundle, Tensor<T> x0,
                         const NoiseSchedule& sched, const TrainConfig& config,
                         Rng& rng) {
  config.validate(sched);
  const auto start = std::chrono::steady_clock::now();
  Denoiser<T> handle = bundle.denoiser_handle();
  Reconstruction<T> rec = norm_guided_reconstruct(x0, config.t_s_infer, config.t_b_infer,
                                                  config.w, handle, rng, sched);
  Tensor<T> heatmap = bundle.segment(std::move(x0), rec.image);
  InferenceResult<T> out;
  out.reconstruction = std::move(rec.image);
  out.heatmap = std::move(heatmap);
  out.image_score = top_k_mean(out.heatmap, config.top_k);
  out.denoiser_forwards = rec.forwards_used;
  out.forwards_used = rec.forwards_used + 1;
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// Iterative baseline: corrupt to x_{t_start}, then walk the reverse chain
// down to t=0 (one denoiser forward per step, z=0 on the final step).
template <typename T>
Reconstruction<T> iterative_reconstruct(const Denoiser<T>& denoiser, Tensor<T> x0,
                                        int t_start, const NoiseSchedule& sched,
                                        Rng& rng) {
  if (t_start < 1 || t_start >= sched.T)
    throw std::invalid_argument("iterative_reconstruct: need 1 <= t_start < T");
  Tensor<T> eps = randn<T>(rng, x0.shape());
  Tensor<T> x = forward_diffuse(std::move(x0), t_start, std::move(eps), sched);
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  for (int t = t_start; t >= 1; --t) {
    std::vector<int> ts(n, t);
    Tensor<T> eps_pred = denoiser(x, ts);
    Tensor<T> z = t > 1 ? randn<T>(rng, x.shape()) : Tensor<T>::zeros(x.shape());
    x = ddpm_step(std::move(x), t, std::move(eps_pred), std::move(z), sched);
  }
  return {std::move(x), t_start};
}

template <typename T>
Reconstruction<T> iterative_reconstruct(const ModelBundle<T>& bundle, Tensor<T> x0,
                                        int t_start, const NoiseSchedule& sched,
                                        Rng& rng) {
  Denoiser<T> handle = bundle.denoiser_handle();
  return iterative_reconstruct(handle, std::move(x0), t_start, sched, rng);
}

struct BenchRow {
  std::string paradigm;
  std::int64_t forwards_per_image = 0;  // exact, by denoiser call counter
  double fps = 0;                       // wall-clock, environment dependent
};

// Reconstruction-paradigm cost comparison: exact forward counts plus
// measured wall-clock throughput for norm-guided one-step versus iterative
// sampling from bench_t_start.
template <typename T>
std::vector<BenchRow> bench_paradigms(const ModelBundle<T>& bundle,
                                      std::span<const Tensor<T>> images,
                                      const NoiseSchedule& sched,
                                      const TrainConfig& config) {
  if (images.empty()) throw std::invalid_argument("bench_paradigms: no images");
  config.validate(sched);
  Denoiser<T> handle = bundle.denoiser_handle();
  std::vector<BenchRow> rows;
  {
    handle.reset_calls();
    Rng rng(config.seed, "bench/norm-guided");
    const auto start = std::chrono::steady_clock::now();
    for (const auto& img : images)
      norm_guided_reconstruct(img, config.t_s_infer, config.t_b_infer, config.w, handle,
                              rng, sched);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back({"norm-guided",
                    handle.calls() / static_cast<std::int64_t>(images.size()),
                    static_cast<double>(images.size()) / secs});
  }
  {
    handle.reset_calls();
    Rng rng(config.seed, "bench/iterative");
    const auto start = std::chrono::steady_clock::now();
    for (const auto& img : images)
      iterative_reconstruct(handle, img, config.bench_t_start, sched, rng);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back({"iterative",
                    handle.calls() / static_cast<std::int64_t>(images.size()),
                    static_cast<double>(images.size()) / secs});
  }
  return rows;
}

// Bridges a heatmap tensor into the metrics module's plain pixel map.
template <typename T>
metrics::PixelMap heatmap_to_map(const Tensor<T>& heatmap) {
  metrics::PixelMap map;
  map.height = static_cast<int>(heatmap.dim(2));
  map.width = static_cast<int>(heatmap.dim(3));
  map.values.assign(heatmap.data().begin(), heatmap.data().end());
  return map;
}

}  // namespace adk::pipeline
