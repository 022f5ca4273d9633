// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor. Matrices are row-major; a rank-1
// tensor of n elements is treated as a 1 x n row where a matrix is expected.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "slowrec/numerics/tensor.hpp"

namespace slowrec::num {

// Elementwise arithmetic (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// x [n, c] plus a bias of c elements added to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

/// [n, k] x [k, m] -> [n, m]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [n, k] x [m, k]^T -> [n, m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& x);
/// The same tanh-approximated GELU on a plain value.
double gelu_scalar(double v);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);

/// Elementwise minimum; ties send the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);
/// Elementwise clamp; gradient passes only strictly inside (lo, hi).
Tensor clamp(const Tensor& x, double lo, double hi);

/// Row-wise layer normalization with affine gamma/beta of `cols` elements.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Row-wise softmax(x / tau).
Tensor softmax(const Tensor& x, double tau = 1.0);
/// Row-wise log softmax(x / tau).
Tensor log_softmax(const Tensor& x, double tau = 1.0);

/// Multi-head scaled dot-product attention.
/// q [Tq, H], k/v [Tk, H]; heads split H evenly. `causal` masks key j > i
/// (requires Tq == Tk). `key_mask`, when non-empty, has Tk entries and
/// excludes keys with value 0.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal,
                 std::span<const std::uint8_t> key_mask = {});

/// Packed batch of independent sequences: segment b attends query rows
/// [query_offsets[b], query_offsets[b+1]) to key rows
/// [key_offsets[b], key_offsets[b+1]). Offsets have B + 1 entries.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, bool causal,
                 std::span<const std::size_t> query_offsets,
                 std::span<const std::size_t> key_offsets);

/// Row sums (means) per segment of an [n, c] matrix -> [B, c].
Tensor segment_sum_rows(const Tensor& x, std::span<const std::size_t> offsets);
Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets);
/// out[i, :] = x[i, :] * factors[i]
Tensor scale_rows(const Tensor& x, std::span<const double> factors);

/// out[i] = x[i, index[i]] for a [n, c] input; result has n elements.
Tensor pick(const Tensor& x, std::span<const std::size_t> index);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Column sums of an [n, c] matrix -> c elements.
Tensor sum_rows(const Tensor& x);
/// Mean of the rows selected by `mask` (all rows when empty) -> [1, c].
Tensor mean_rows(const Tensor& x, std::span<const std::uint8_t> mask = {});
/// Sum of squared entries.
Tensor squared_norm(const Tensor& x);

/// Gathers rows of `table` [V, H] -> [ids.size(), H].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

/// Value of `quantized`, gradient routed unchanged to `continuous`.
Tensor straight_through(const Tensor& quantized, const Tensor& continuous);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

/// Plain (non-tape) tempered softmax with max-subtraction. Rejects
/// non-finite logits and non-positive temperatures.
std::vector<double> softmax_temp(std::span<const double> logits, double tau);
std::vector<double> log_softmax_temp(std::span<const double> logits, double tau);

}  // namespace slowrec::num
