// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slowrec/numerics/optim.hpp"
#include "slowrec/numerics/tensor.hpp"

namespace slowrec::num {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-5;
  /// Denominator floor so that near-zero gradients compare absolutely.
  double floor = 1e-3;
  /// Coordinates sampled per parameter tensor.
  std::size_t max_coords = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences, |a - n| / max(|a|, |n|, floor), on at most max_coords
/// random coordinates per tensor. loss_fn must be deterministic in the
/// parameter values. Failures are reported, never thrown.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace slowrec::num
