// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace slowrec::num {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (auto p : params) p.tensor.zero_grad();
  {
    Tensor loss = loss_fn();
    loss.backward();
  }
  std::mt19937_64 rng(options.seed);
  for (auto p : params) {
    auto& t = p.tensor;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    auto values = t.mutable_data();
    for (auto idx : coords) {
      const double saved = values[idx];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[idx] = saved + options.eps;
        plus = loss_fn().item();
        values[idx] = saved - options.eps;
        minus = loss_fn().item();
        values[idx] = saved;
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (std::isnan(rel) || rel > report.max_rel_error) {
        report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        report.worst_param = p.name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
    t.zero_grad();
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace slowrec::num
