// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "slowrec/numerics/tensor.hpp"

namespace slowrec::num {

using Rng = std::mt19937_64;

/// Gaussian-initialized trainable leaf.
Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = true);
/// Uniform(-bound, bound) trainable leaf.
Tensor uniform(Shape shape, double bound, Rng& rng, bool requires_grad = true);

/// Derives an independent stream from a base seed and a salt; used so that
/// each subsystem of a run draws from its own reproducible generator.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

}  // namespace slowrec::num
