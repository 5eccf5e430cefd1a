#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "adk/tensor.hpp"

namespace adk {

template <typename T>
struct AdamConfig {
  T learning_rate = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Standard bias-corrected Adam. Parameters are updated in place; the moment
// accumulators mirror each parameter's shape.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig<T> config = {})
      : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  std::int64_t step_count() const { return step_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  const AdamConfig<T>& config() const { return config_; }

  void step(std::span<const Tensor<T>> grads) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("adam: gradient count does not match parameters");
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (grads[i].shape() != params_[i].shape())
        throw std::invalid_argument("adam: gradient shape mismatch at parameter " +
                                    std::to_string(i));
    ++step_;
    const T b1 = config_.beta1, b2 = config_.beta2;
    const T bc1 = T(1) - std::pow(b1, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(b2, static_cast<T>(step_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      std::span<const T> g = grads[i].data();
      std::span<T> p = params_[i].data_mut();
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        p[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  void step(const std::vector<Tensor<T>>& grads) {
    step(std::span<const Tensor<T>>(grads));
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig<T> config_;
  std::int64_t step_ = 0;
};

}  // namespace adk
