#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "adk/rng.hpp"
#include "adk/tensor.hpp"

namespace adk {

// Diffusion noise schedule and the closed-form sampling algebra built on it.
//
// Conventions, fixed once: timesteps are 0-based, t in {0,...,T-1}, and
// alpha_bar[t] = prod_{i=0..t} alpha[i]. The small-noise set is {0,...,tau},
// the large-noise set {tau+1,...,T-1}. Coefficients are computed and stored
// in 64-bit and narrowed at the point of use.
struct NoiseSchedule {
  int T = 0;
  int tau = 0;
  std::vector<double> betas;
  std::vector<double> alphas;       // 1 - beta
  std::vector<double> alpha_bars;   // running product of alphas
  std::vector<double> beta_tildes;  // (1-abar[t-1])/(1-abar[t]) * beta[t]; 0 at t=0

  void check_t(int t, const char* op) const {
    if (t < 0 || t >= T)
      throw std::invalid_argument(std::string(op) + ": timestep " + std::to_string(t) +
                                  " outside [0," + std::to_string(T - 1) + "]");
  }

  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bars[static_cast<std::size_t>(t)]); }
  double sqrt_one_minus_alpha_bar(int t) const {
    return std::sqrt(1.0 - alpha_bars[static_cast<std::size_t>(t)]);
  }
};

// Linear beta ramp over T steps with split point tau.
inline NoiseSchedule linear_schedule(int T, double beta_start, double beta_end, int tau) {
  if (T < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw std::invalid_argument("linear_schedule: need 0 < beta_start <= beta_end < 1");
  if (tau <= 0 || tau >= T)
    throw std::invalid_argument("linear_schedule: tau must satisfy 0 < tau < T");
  NoiseSchedule s;
  s.T = T;
  s.tau = tau;
  s.betas.resize(static_cast<std::size_t>(T));
  s.alphas.resize(static_cast<std::size_t>(T));
  s.alpha_bars.resize(static_cast<std::size_t>(T));
  s.beta_tildes.resize(static_cast<std::size_t>(T));
  double running = 1.0;
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas[static_cast<std::size_t>(t)] = beta;
    s.alphas[static_cast<std::size_t>(t)] = 1.0 - beta;
    running *= 1.0 - beta;
    s.alpha_bars[static_cast<std::size_t>(t)] = running;
    s.beta_tildes[static_cast<std::size_t>(t)] =
        t == 0 ? 0.0
               : (1.0 - s.alpha_bars[static_cast<std::size_t>(t - 1)]) /
                     (1.0 - s.alpha_bars[static_cast<std::size_t>(t)]) * beta;
  }
  return s;
}

inline NoiseSchedule default_schedule() { return linear_schedule(1000, 1e-4, 1e-2, 300); }

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
template <typename T>
Tensor<T> forward_diffuse(Tensor<T> x0, int t, Tensor<T> eps, const NoiseSchedule& sched) {
  sched.check_t(t, "forward_diffuse");
  if (x0.shape() != eps.shape())
    throw std::invalid_argument("forward_diffuse: eps shape must match x0");
  const T a = static_cast<T>(sched.sqrt_alpha_bar(t));
  const T b = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t));
  return add(mul_scalar(x0, a), mul_scalar(eps, b));
}

// Batched variant: one timestep per sample of an [N,...] tensor.
template <typename T>
Tensor<T> forward_diffuse(Tensor<T> x0, std::span<const int> ts, Tensor<T> eps,
                          const NoiseSchedule& sched) {
  if (x0.dim(0) != static_cast<std::int64_t>(ts.size()))
    throw std::invalid_argument("forward_diffuse: one timestep per sample required");
  if (x0.shape() != eps.shape())
    throw std::invalid_argument("forward_diffuse: eps shape must match x0");
  std::vector<T> a(ts.size()), b(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sched.check_t(ts[i], "forward_diffuse");
    a[i] = static_cast<T>(sched.sqrt_alpha_bar(ts[i]));
    b[i] = static_cast<T>(sched.sqrt_one_minus_alpha_bar(ts[i]));
  }
  return add(scale_per_sample(x0, a), scale_per_sample(eps, b));
}

// One-step denoising: xhat0 = (x_t - sqrt(1-abar_t) eps_pred) / sqrt(abar_t)
template <typename T>
Tensor<T> one_step_denoise(Tensor<T> x_t, int t, Tensor<T> eps_pred,
                           const NoiseSchedule& sched) {
  sched.check_t(t, "one_step_denoise");
  if (x_t.shape() != eps_pred.shape())
    throw std::invalid_argument("one_step_denoise: eps_pred shape must match x_t");
  const T inv_a = static_cast<T>(1.0 / sched.sqrt_alpha_bar(t));
  const T b = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t));
  return mul_scalar(sub(x_t, mul_scalar(eps_pred, b)), inv_a);
}

template <typename T>
Tensor<T> one_step_denoise(Tensor<T> x_t, std::span<const int> ts, Tensor<T> eps_pred,
                           const NoiseSchedule& sched) {
  if (x_t.dim(0) != static_cast<std::int64_t>(ts.size()))
    throw std::invalid_argument("one_step_denoise: one timestep per sample required");
  if (x_t.shape() != eps_pred.shape())
    throw std::invalid_argument("one_step_denoise: eps_pred shape must match x_t");
  std::vector<T> inv_a(ts.size()), b(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sched.check_t(ts[i], "one_step_denoise");
    inv_a[i] = static_cast<T>(1.0 / sched.sqrt_alpha_bar(ts[i]));
    b[i] = static_cast<T>(sched.sqrt_one_minus_alpha_bar(ts[i]));
  }
  return scale_per_sample(sub(x_t, scale_per_sample(eps_pred, b)), inv_a);
}

// One reverse step of the iterative sampler:
// x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_pred) / sqrt(alpha_t) + btilde_t z
// The final step (t=1) is taken with z = 0 by the caller.
template <typename T>
Tensor<T> ddpm_step(Tensor<T> x_t, int t, Tensor<T> eps_pred, Tensor<T> z,
                    const NoiseSchedule& sched) {
  if (t < 1 || t >= sched.T)
    throw std::invalid_argument("ddpm_step: timestep must satisfy 1 <= t < T");
  if (x_t.shape() != eps_pred.shape() || x_t.shape() != z.shape())
    throw std::invalid_argument("ddpm_step: shape mismatch");
  const double alpha = sched.alphas[static_cast<std::size_t>(t)];
  const T coef = static_cast<T>((1.0 - alpha) / sched.sqrt_one_minus_alpha_bar(t));
  const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
  const T bt = static_cast<T>(sched.beta_tildes[static_cast<std::size_t>(t)]);
  Tensor<T> mean = mul_scalar(sub(x_t, mul_scalar(eps_pred, coef)), inv_sqrt_alpha);
  return add(mean, mul_scalar(z, bt));
}

// Norm-guided noise: eps_mod = eps_s - sqrt(1-abar_{t_s}) * w * (n_ts - x_ts)
template <typename T>
Tensor<T> norm_guided_noise(Tensor<T> eps_s, Tensor<T> x_ts, Tensor<T> n_ts, int t_s,
                            double w, const NoiseSchedule& sched) {
  sched.check_t(t_s, "norm_guided_noise");
  if (t_s > sched.tau)
    throw std::invalid_argument("norm_guided_noise: t_s must lie in the small-noise set");
  if (eps_s.shape() != x_ts.shape() || eps_s.shape() != n_ts.shape())
    throw std::invalid_argument("norm_guided_noise: shape mismatch");
  const T c = static_cast<T>(sched.sqrt_one_minus_alpha_bar(t_s) * w);
  return sub(eps_s, mul_scalar(sub(n_ts, x_ts), c));
}

template <typename T>
Tensor<T> norm_guided_noise(Tensor<T> eps_s, Tensor<T> x_ts, Tensor<T> n_ts,
                            std::span<const int> ts, double w, const NoiseSchedule& sched) {
  if (eps_s.shape() != x_ts.shape() || eps_s.shape() != n_ts.shape())
    throw std::invalid_argument("norm_guided_noise: shape mismatch");
  if (eps_s.dim(0) != static_cast<std::int64_t>(ts.size()))
    throw std::invalid_argument("norm_guided_noise: one timestep per sample required");
  std::vector<T> c(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sched.check_t(ts[i], "norm_guided_noise");
    if (ts[i] > sched.tau)
      throw std::invalid_argument("norm_guided_noise: t_s must lie in the small-noise set");
    c[i] = static_cast<T>(sched.sqrt_one_minus_alpha_bar(ts[i]) * w);
  }
  return sub(eps_s, scale_per_sample(sub(n_ts, x_ts), c));
}

// Callable denoiser handle with an exact forward-pass counter. The wrapped
// function receives a batch and one timestep per sample.
template <typename T>
struct Denoiser {
  std::function<Tensor<T>(Tensor<T>, std::span<const int>)> fn;
  std::shared_ptr<std::int64_t> forward_calls = std::make_shared<std::int64_t>(0);

  Tensor<T> operator()(Tensor<T> x_t, std::span<const int> ts) const {
    ++*forward_calls;
    return fn(std::move(x_t), ts);
  }
  std::int64_t calls() const { return *forward_calls; }
  void reset_calls() const { *forward_calls = 0; }
};

// Core of the norm-guided reconstruction, shared between inference (which
// draws its own noise and runs the denoiser) and training (which reuses the
// corruptions and predictions already made for the noise loss):
//   n     = one-step denoise of x_tb at t_b                  (large scale)
//   n_ts  = sqrt(abar_ts) n + sqrt(1-abar_ts) eps_pred_s     (re-perturbed
//           with the *predicted* noise, not a fresh draw)
//   eps^  = eps_pred_s - sqrt(1-abar_ts) w (n_ts - x_ts)
//   out   = one-step denoise of x_ts at t_s using eps^
template <typename T>
Tensor<T> norm_guided_core(Tensor<T> x_ts, Tensor<T> x_tb, Tensor<T> eps_pred_s,
                           Tensor<T> eps_pred_b, std::span<const int> ts,
                           std::span<const int> tb, double w,
                           const NoiseSchedule& sched) {
  Tensor<T> n = one_step_denoise(std::move(x_tb), tb, std::move(eps_pred_b), sched);
  Tensor<T> n_ts = forward_diffuse(std::move(n), ts, eps_pred_s, sched);
  Tensor<T> eps_mod =
      norm_guided_noise(std::move(eps_pred_s), x_ts, std::move(n_ts), ts, w, sched);
  return one_step_denoise(std::move(x_ts), ts, std::move(eps_mod), sched);
}

template <typename T>
struct Reconstruction {
  Tensor<T> image;
  int forwards_used = 0;
};

// Full norm-guided reconstruction of one batch: corrupt at both scales, run
// the denoiser twice, combine through norm_guided_core. Requires
// 0 <= t_s <= tau < t_b < T.
template <typename T>
Reconstruction<T> norm_guided_reconstruct(Tensor<T> x0, int t_s, int t_b, double w,
                                          const Denoiser<T>& denoiser, Rng& rng,
                                          const NoiseSchedule& sched) {
  if (!(0 <= t_s && t_s <= sched.tau && sched.tau < t_b && t_b < sched.T))
    throw std::invalid_argument(
        "norm_guided_reconstruct: need 0 <= t_s <= tau < t_b < T, got t_s=" +
        std::to_string(t_s) + " t_b=" + std::to_string(t_b));
  if (x0.ndim() != 4)
    throw std::invalid_argument("norm_guided_reconstruct: expected [N,C,H,W] input");
  const std::size_t n = static_cast<std::size_t>(x0.dim(0));
  std::vector<int> ts(n, t_s), tb(n, t_b);
  Tensor<T> eps_s = randn<T>(rng, x0.shape());
  Tensor<T> eps_b = randn<T>(rng, x0.shape());
  Tensor<T> x_ts = forward_diffuse(x0, std::span<const int>(ts), eps_s, sched);
  Tensor<T> x_tb = forward_diffuse(std::move(x0), std::span<const int>(tb), eps_b, sched);
  Tensor<T> eps_pred_b = denoiser(x_tb, tb);
  Tensor<T> eps_pred_s = denoiser(x_ts, ts);
  Tensor<T> out = norm_guided_core(std::move(x_ts), std::move(x_tb), std::move(eps_pred_s),
                                   std::move(eps_pred_b), ts, tb, w, sched);
  return {std::move(out), 2};
}

}  // namespace adk
