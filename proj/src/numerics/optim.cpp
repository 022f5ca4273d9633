// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/numerics/optim.hpp"

#include <cmath>

#include <fmt/format.h>

namespace slowrec::num {

void adamw_step(std::span<double> param, std::span<const double> grad, MomentState& state,
                std::int64_t step, const AdamWConfig& config) {
  if (grad.size() != param.size()) {
    throw std::invalid_argument(
        fmt::format("adamw_step: {} gradients for {} parameters", grad.size(), param.size()));
  }
  if (step < 1) throw std::invalid_argument("adamw_step: step index is 1-based");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (std::isnan(grad[i])) throw NumericalError(fmt::format("adamw_step: NaN gradient at {}", i));
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size() || state.v.size() != param.size()) {
    throw std::invalid_argument("adamw_step: moment shapes disagree with parameter");
  }
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    double p = param[i] * decay;
    p -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    param[i] = round_to_precision(p);
  }
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config)
    : params_(std::move(params)), moments_(params_.size()), config_(config) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    moments_[i].m.assign(params_[i].tensor.size(), 0.0);
    moments_[i].v.assign(params_[i].tensor.size(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) {
      if (std::isnan(g)) throw NumericalError("AdamW: NaN gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    std::span<const double> g = t.grad();
    if (g.empty()) {
      zeros.assign(t.size(), 0.0);
      g = zeros;
    }
    adamw_step(t.mutable_data(), g, moments_[i], step_, config_);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      auto t = p.tensor;
      if (!t.has_grad()) continue;
      for (auto& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace slowrec::num
