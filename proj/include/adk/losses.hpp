#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "adk/tensor.hpp"

// Training losses: the anomaly-gated two-scale noise objective, and the
// smooth-L1 + focal segmentation objective. All reductions are means so the
// magnitudes are resolution independent.
namespace adk::losses {

struct LossWeights {
  double gamma = 5.0;                // weight of the focal term
  double smooth_l1_transition = 1.0;  // quadratic/linear knot
  double focal_focusing = 2.0;        // focusing exponent
  double focal_alpha = 0.75;          // positive-class weight

  void validate() const {
    if (gamma < 0) throw std::invalid_argument("LossWeights: gamma must be >= 0");
    if (!(smooth_l1_transition > 0))
      throw std::invalid_argument("LossWeights: smooth-l1 transition must be > 0");
    if (focal_focusing < 0)
      throw std::invalid_argument("LossWeights: focal focusing must be >= 0");
    if (!(focal_alpha > 0 && focal_alpha < 1))
      throw std::invalid_argument("LossWeights: focal alpha must lie in (0,1)");
  }
};

// Per-sample (1-y) * (mse_s + mse_b) / 2, then batch mean; each mse is the
// pixel mean of the squared prediction error at that noise scale.
template <typename T>
Tensor<T> noise_loss(Tensor<T> eps_s, Tensor<T> eps_pred_s, Tensor<T> eps_b,
                     Tensor<T> eps_pred_b, const std::vector<int>& labels) {
  if (eps_s.shape() != eps_pred_s.shape() || eps_b.shape() != eps_pred_b.shape() ||
      eps_s.shape() != eps_b.shape())
    throw std::invalid_argument("noise_loss: shape mismatch");
  const std::int64_t n = eps_s.dim(0);
  if (n != static_cast<std::int64_t>(labels.size()))
    throw std::invalid_argument("noise_loss: one label per sample required");
  Tensor<T> mse_s = mean_per_sample(square(sub(std::move(eps_s), std::move(eps_pred_s))));
  Tensor<T> mse_b = mean_per_sample(square(sub(std::move(eps_b), std::move(eps_pred_b))));
  std::vector<T> gate(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < gate.size(); ++i)
    gate[i] = labels[i] ? T(0) : T(1);
  Tensor<T> gated = mul(add(std::move(mse_s), std::move(mse_b)),
                        Tensor<T>::from_vector({n}, std::move(gate)));
  return mul_scalar(mean(std::move(gated)), T(0.5));
}

// Mean smooth-L1 between a binary target mask and the predicted scores.
template <typename T>
Tensor<T> smooth_l1(Tensor<T> target, Tensor<T> pred, double transition) {
  if (target.shape() != pred.shape())
    throw std::invalid_argument("smooth_l1: shape mismatch");
  if (!(transition > 0)) throw std::invalid_argument("smooth_l1: transition must be > 0");
  const T tr = static_cast<T>(transition);
  const std::size_t n = static_cast<std::size_t>(target.numel());
  T acc = T(0);
  std::span<const T> md = target.data(), pd = pred.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T d = md[i] - pd[i];
    const T a = std::abs(d);
    acc += a < tr ? T(0.5) * d * d / tr : a - T(0.5) * tr;
  }
  acc /= static_cast<T>(n);
  return Tensor<T>::make_op(
      Shape{1}, std::vector<T>{acc}, {target, pred},
      [target, pred, tr, n](detail::Node<T>& node) mutable {
        const T gy = node.grad[0] / static_cast<T>(n);
        std::span<const T> md2 = target.data(), pd2 = pred.data();
        auto piece = [&](std::size_t i) {
          const T d = md2[i] - pd2[i];
          return std::abs(d) < tr ? d / tr : (d > 0 ? T(1) : T(-1));
        };
        if (pred.requires_grad()) {
          auto& g = pred.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] -= gy * piece(i);
        }
        if (target.requires_grad()) {
          auto& g = target.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] += gy * piece(i);
        }
      });
}

// Mean binary focal loss; predictions are clamped away from {0,1} before the
// log, and clamped pixels contribute zero gradient.
template <typename T>
Tensor<T> focal_loss(Tensor<T> target, Tensor<T> pred, double focusing, double alpha,
                     double clamp = 1e-6) {
  if (target.shape() != pred.shape())
    throw std::invalid_argument("focal_loss: shape mismatch");
  if (focusing < 0) throw std::invalid_argument("focal_loss: focusing must be >= 0");
  if (!(alpha > 0 && alpha < 1))
    throw std::invalid_argument("focal_loss: alpha must lie in (0,1)");
  const T g_exp = static_cast<T>(focusing);
  const T a_pos = static_cast<T>(alpha);
  const T lo = static_cast<T>(clamp), hi = T(1) - static_cast<T>(clamp);
  const std::size_t n = static_cast<std::size_t>(target.numel());
  std::span<const T> md = target.data(), pd = pred.data();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = md[i] != T(0);
    const T m = std::min(hi, std::max(lo, pd[i]));
    const T pt = positive ? m : T(1) - m;
    const T at = positive ? a_pos : T(1) - a_pos;
    acc += -at * std::pow(T(1) - pt, g_exp) * std::log(pt);
  }
  acc /= static_cast<T>(n);
  return Tensor<T>::make_op(
      Shape{1}, std::vector<T>{acc}, {target, pred},
      [target, pred, g_exp, a_pos, lo, hi, n](detail::Node<T>& node) mutable {
        if (!pred.requires_grad()) return;  // the mask is a constant target
        auto& g = pred.grad_buffer();
        const T gy = node.grad[0] / static_cast<T>(n);
        std::span<const T> md2 = target.data(), pd2 = pred.data();
        for (std::size_t i = 0; i < n; ++i) {
          if (pd2[i] < lo || pd2[i] > hi) continue;  // clamped: zero gradient
          const bool positive = md2[i] != T(0);
          const T pt = positive ? pd2[i] : T(1) - pd2[i];
          const T at = positive ? a_pos : T(1) - a_pos;
          const T one_m = T(1) - pt;
          // d/dpt of -at (1-pt)^g log(pt)
          T dfdpt = -at * std::pow(one_m, g_exp) / pt;
          if (g_exp > T(0)) dfdpt += at * g_exp * std::pow(one_m, g_exp - T(1)) * std::log(pt);
          g[i] += gy * (positive ? dfdpt : -dfdpt);
        }
      });
}

// L_mask = smooth_l1 + gamma * focal
template <typename T>
Tensor<T> mask_loss(Tensor<T> target, Tensor<T> pred, const LossWeights& weights) {
  weights.validate();
  Tensor<T> s = smooth_l1(target, pred, weights.smooth_l1_transition);
  Tensor<T> f = focal_loss(std::move(target), std::move(pred), weights.focal_focusing,
                           weights.focal_alpha);
  return add(std::move(s), mul_scalar(std::move(f), static_cast<T>(weights.gamma)));
}

// L_total = L_noise + L_mask
template <typename T>
Tensor<T> total_loss(Tensor<T> noise, Tensor<T> mask) {
  return add(std::move(noise), std::move(mask));
}

}  // namespace adk::losses
