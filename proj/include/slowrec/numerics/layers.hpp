// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small parameter containers shared by the models, plus a binary tensor
// checkpoint format.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "slowrec/numerics/init.hpp"
#include "slowrec/numerics/ops.hpp"
#include "slowrec/numerics/optim.hpp"

namespace slowrec::num {

using ParamList = std::vector<NamedTensor>;

/// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  /// Weights ~ N(0, stddev^2); a negative stddev means 1/sqrt(in).
  Linear(std::size_t in, std::size_t out, Rng& rng, double stddev = -1.0);

  Tensor operator()(const Tensor& x) const { return add_rowwise(matmul(x, weight), bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Versioned little-endian dump of named tensors (shape + raw doubles).
void save_tensors(const std::filesystem::path& path, const ParamList& params);
/// Loads into the given tensors, which must match by name, order and shape.
/// Throws std::runtime_error on any mismatch.
void load_tensors(const std::filesystem::path& path, const ParamList& params);

/// Copies values (not graph state) from `src` into `dst`; shapes must match.
void copy_values(const ParamList& src, const ParamList& dst);

}  // namespace slowrec::num
