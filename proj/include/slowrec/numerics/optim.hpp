// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slowrec/numerics/tensor.hpp"

namespace slowrec::num {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// First/second moments for one parameter tensor.
struct MomentState {
  std::vector<double> m;
  std::vector<double> v;
};

/// Decoupled weight decay Adam update on a single flat parameter:
///   p <- p * (1 - lr * wd)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// `step` is the 1-based step index used for bias correction. Throws
/// NumericalError (leaving everything untouched) if any gradient is NaN.
void adamw_step(std::span<double> param, std::span<const double> grad, MomentState& state,
                std::int64_t step, const AdamWConfig& config);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// AdamW over a fixed parameter list. All gradients are validated before
/// any parameter moves, so a NaN anywhere aborts the whole step.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWConfig config);

  void step();
  void zero_grad();

  std::int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const std::vector<MomentState>& moments() const { return moments_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<MomentState> moments_;
  AdamWConfig config_;
  std::int64_t step_ = 0;
};

/// Global L2 norm clipping over the accumulated gradients. Returns the
/// pre-clip norm.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

}  // namespace slowrec::num
