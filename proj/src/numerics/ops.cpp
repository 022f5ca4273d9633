// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace slowrec::num {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;

using detail::make_result;
using detail::Node;

MatMap as_mat(Buffer& v, std::size_t r, std::size_t c) {
  return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(fmt::format("{}: shape mismatch {} vs {}", op,
                                            shape_string(a.shape()), shape_string(b.shape())));
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D df) {
  Buffer out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    auto& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    auto& pb = parent(self, 1);
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  const auto r = x.rows(), c = x.cols();
  if (bias.size() != c) {
    throw std::invalid_argument(fmt::format("add_rowwise: bias of {} for {} columns", bias.size(), c));
  }
  Buffer out(x.size());
  auto in = x.data(), b = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[i * c + j] + b[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [r, c](Node& self) {
    auto& px = parent(self, 0);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    auto& pb = parent(self, 1);
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw std::invalid_argument(fmt::format("matmul: {} x {}", shape_string(a.shape()),
                                            shape_string(b.shape())));
  }
  Buffer out(n * m);
  as_mat(out, n, m).noalias() = as_mat(a.node()->value, n, k) * as_mat(b.node()->value, k, m);
  return make_result(matrix_shape(n, m), std::move(out), {a, b}, [n, k, m](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    auto dc = as_mat(self.grad, n, m);
    if (pa.requires_grad) {
      as_mat(pa.grad_buffer(), n, k).noalias() += dc * as_mat(pb.value, k, m).transpose();
    }
    if (pb.requires_grad) {
      as_mat(pb.grad_buffer(), k, m).noalias() += as_mat(pa.value, n, k).transpose() * dc;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw std::invalid_argument(fmt::format("matmul_nt: {} x {}^T", shape_string(a.shape()),
                                            shape_string(b.shape())));
  }
  Buffer out(n * m);
  as_mat(out, n, m).noalias() =
      as_mat(a.node()->value, n, k) * as_mat(b.node()->value, m, k).transpose();
  return make_result(matrix_shape(n, m), std::move(out), {a, b}, [n, k, m](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    auto dc = as_mat(self.grad, n, m);
    if (pa.requires_grad) {
      as_mat(pa.grad_buffer(), n, k).noalias() += dc * as_mat(pb.value, m, k);
    }
    if (pb.requires_grad) {
      as_mat(pb.grad_buffer(), m, k).noalias() += dc.transpose() * as_mat(pa.value, n, k);
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); }

Tensor gelu(const Tensor& x) {
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(v)); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  Buffer out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(x[i], y[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = parent(self, 0);
    auto& pb = parent(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool take_a = pa.value[i] <= pb.value[i];
      if (take_a && pa.requires_grad) pa.grad_buffer()[i] += self.grad[i];
      if (!take_a && pb.requires_grad) pb.grad_buffer()[i] += self.grad[i];
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw std::invalid_argument("layer_norm: affine parameters must match the row width");
  }
  Buffer out(x.size());
  auto normed = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  auto in = x.data(), g = gamma.data(), b = beta.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mu) * is;
      (*normed)[i * c + j] = xh;
      out[i * c + j] = g[j] * xh + b[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [r, c, normed, inv_std](Node& self) {
    auto& px = parent(self, 0);
    auto& pg = parent(self, 1);
    auto& pb = parent(self, 2);
    const auto& xh = *normed;
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += self.grad[i * c + j] * xh[i * c + j];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      const double inv_c = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = self.grad[i * c + j] * pg.value[j];
          mean_d += d;
          mean_dx += d * xh[i * c + j];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        for (std::size_t j = 0; j < c; ++j) {
          const double d = self.grad[i * c + j] * pg.value[j];
          gx[i * c + j] += (*inv_std)[i] * (d - mean_d - xh[i * c + j] * mean_dx);
        }
      }
    }
  });
}

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw std::invalid_argument(fmt::format("temperature must be positive and finite, got {}", tau));
  }
}

// Writes log softmax(x/tau) of one row into out.
void row_log_softmax(const double* x, std::size_t n, double tau, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j] / tau);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] / tau - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] / tau - lse;
}

}  // namespace

Tensor softmax(const Tensor& x, double tau) {
  check_tau(tau);
  const auto r = x.rows(), c = x.cols();
  Buffer out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    row_log_softmax(x.data().data() + i * c, c, tau, out.data() + i * c);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(out[i * c + j]);
  }
  return make_result(x.shape(), std::move(out), {x}, [r, c, tau](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot) / tau;
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, double tau) {
  check_tau(tau);
  const auto r = x.rows(), c = x.cols();
  Buffer out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    row_log_softmax(x.data().data() + i * c, c, tau, out.data() + i * c);
  }
  return make_result(x.shape(), std::move(out), {x}, [r, c, tau](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += (self.grad[i * c + j] - std::exp(self.value[i * c + j]) * gs) / tau;
      }
    }
  });
}

namespace {

// Packed multi-sequence attention: segment b maps query rows
// [qo[b], qo[b+1]) onto key rows [ko[b], ko[b+1]).
Tensor packed_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal,
                        std::vector<std::size_t> qo, std::vector<std::size_t> ko,
                        std::span<const std::uint8_t> key_mask) {
  const auto tq = q.rows(), tk = k.rows(), h = q.cols();
  if (k.cols() != h || v.cols() != h || v.rows() != tk) {
    throw std::invalid_argument("attention: q/k/v widths or key counts disagree");
  }
  if (heads == 0 || h % heads != 0) {
    throw std::invalid_argument(fmt::format("attention: width {} not divisible into {} heads", h, heads));
  }
  if (qo.size() != ko.size() || qo.size() < 2 || qo.front() != 0 || ko.front() != 0 || qo.back() != tq ||
      ko.back() != tk) {
    throw std::invalid_argument("attention: segment offsets do not cover the inputs");
  }
  const auto nseg = qo.size() - 1;
  for (std::size_t b = 0; b < nseg; ++b) {
    if (qo[b + 1] < qo[b] || ko[b + 1] < ko[b]) throw std::invalid_argument("attention: offsets must be sorted");
    if (causal && qo[b + 1] - qo[b] != ko[b + 1] - ko[b]) {
      throw std::invalid_argument("attention: causal mask needs square scores");
    }
  }
  if (!key_mask.empty() && key_mask.size() != tk) {
    throw std::invalid_argument("attention: key mask length differs from key count");
  }
  const auto dh = h / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[seg * heads + head] is [segment queries, segment keys]
  auto probs = std::make_shared<std::vector<RowMat>>(nseg * heads);
  Buffer out(tq * h);
  auto Q = as_mat(q.node()->value, tq, h);
  auto K = as_mat(k.node()->value, tk, h);
  auto V = as_mat(v.node()->value, tk, h);
  auto O = as_mat(out, tq, h);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < nseg; ++b) {
    const auto q0 = static_cast<Eigen::Index>(qo[b]), nq = static_cast<Eigen::Index>(qo[b + 1] - qo[b]);
    const auto k0 = static_cast<Eigen::Index>(ko[b]), nk = static_cast<Eigen::Index>(ko[b + 1] - ko[b]);
    if (nq == 0) continue;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const auto off = static_cast<Eigen::Index>(hd * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      RowMat s = (Q.block(q0, off, nq, w) * K.block(k0, off, nk, w).transpose()) * scale_f;
      for (Eigen::Index i = 0; i < nq; ++i) {
        double mx = neg_inf;
        for (Eigen::Index j = 0; j < nk; ++j) {
          const bool masked = (causal && j > i) || (!key_mask.empty() && key_mask[static_cast<std::size_t>(k0 + j)] == 0);
          if (masked) {
            s(i, j) = neg_inf;
          } else if (std::isnan(s(i, j))) {
            throw NumericalError("attention: non-finite score");
          }
          mx = std::max(mx, s(i, j));
        }
        if (mx == neg_inf) throw std::invalid_argument("attention: a query row has no visible keys");
        double z = 0.0;
        for (Eigen::Index j = 0; j < nk; ++j) {
          const double e = s(i, j) == neg_inf ? 0.0 : std::exp(s(i, j) - mx);
          s(i, j) = e;
          z += e;
        }
        s.row(i) /= z;
      }
      O.block(q0, off, nq, w).noalias() = s * V.block(k0, off, nk, w);
      (*probs)[b * heads + hd] = std::move(s);
    }
  }
  return make_result(matrix_shape(tq, h), std::move(out), {q, k, v},
                     [tq, tk, h, heads, dh, scale_f, probs, qo = std::move(qo), ko = std::move(ko)](Node& self) {
                       auto& pq = parent(self, 0);
                       auto& pk = parent(self, 1);
                       auto& pv = parent(self, 2);
                       auto dO = as_mat(self.grad, tq, h);
                       auto Qv = as_mat(pq.value, tq, h);
                       auto Kv = as_mat(pk.value, tk, h);
                       auto Vv = as_mat(pv.value, tk, h);
                       for (std::size_t b = 0; b + 1 < qo.size(); ++b) {
                         const auto q0 = static_cast<Eigen::Index>(qo[b]);
                         const auto nq = static_cast<Eigen::Index>(qo[b + 1] - qo[b]);
                         const auto k0 = static_cast<Eigen::Index>(ko[b]);
                         const auto nk = static_cast<Eigen::Index>(ko[b + 1] - ko[b]);
                         if (nq == 0) continue;
                         for (std::size_t hd = 0; hd < heads; ++hd) {
                           const auto off = static_cast<Eigen::Index>(hd * dh);
                           const auto w = static_cast<Eigen::Index>(dh);
                           const RowMat& P = (*probs)[b * heads + hd];
                           if (pv.requires_grad) {
                             as_mat(pv.grad_buffer(), tk, h).block(k0, off, nk, w).noalias() +=
                                 P.transpose() * dO.block(q0, off, nq, w);
                           }
                           if (!pq.requires_grad && !pk.requires_grad) continue;
                           RowMat dP = dO.block(q0, off, nq, w) * Vv.block(k0, off, nk, w).transpose();
                           Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
                           RowMat dS = P.array() * (dP.colwise() - rowdot).array();
                           dS *= scale_f;
                           if (pq.requires_grad) {
                             as_mat(pq.grad_buffer(), tq, h).block(q0, off, nq, w).noalias() +=
                                 dS * Kv.block(k0, off, nk, w);
                           }
                           if (pk.requires_grad) {
                             as_mat(pk.grad_buffer(), tk, h).block(k0, off, nk, w).noalias() +=
                                 dS.transpose() * Qv.block(q0, off, nq, w);
                           }
                         }
                       }
                     });
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal,
                 std::span<const std::uint8_t> key_mask) {
  return packed_attention(q, k, v, heads, causal, {0, q.rows()}, {0, k.rows()}, key_mask);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool causal,
                 std::span<const std::size_t> query_offsets, std::span<const std::size_t> key_offsets) {
  return packed_attention(q, k, v, heads, causal, {query_offsets.begin(), query_offsets.end()},
                          {key_offsets.begin(), key_offsets.end()}, {});
}

Tensor segment_sum_rows(const Tensor& x, std::span<const std::size_t> offsets) {
  const auto r = x.rows(), c = x.cols();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != r) {
    throw std::invalid_argument("segment_sum_rows: offsets do not cover the rows");
  }
  const auto nseg = offsets.size() - 1;
  auto off = std::make_shared<std::vector<std::size_t>>(offsets.begin(), offsets.end());
  Buffer out(nseg * c, 0.0);
  auto in = x.data();
  for (std::size_t b = 0; b < nseg; ++b) {
    if ((*off)[b + 1] < (*off)[b]) throw std::invalid_argument("segment_sum_rows: offsets must be sorted");
    for (std::size_t i = (*off)[b]; i < (*off)[b + 1]; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * c + j] += in[i * c + j];
  }
  return make_result(matrix_shape(nseg, c), std::move(out), {x}, [c, off](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t b = 0; b + 1 < off->size(); ++b)
      for (std::size_t i = (*off)[b]; i < (*off)[b + 1]; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[b * c + j];
  });
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets) {
  const auto nseg = offsets.size() < 2 ? 0 : offsets.size() - 1;
  std::vector<double> inv(nseg);
  for (std::size_t b = 0; b < nseg; ++b) {
    if (offsets[b + 1] <= offsets[b]) throw std::invalid_argument("segment_mean_rows: empty segment");
    inv[b] = 1.0 / static_cast<double>(offsets[b + 1] - offsets[b]);
  }
  return scale_rows(segment_sum_rows(x, offsets), inv);
}

Tensor scale_rows(const Tensor& x, std::span<const double> factors) {
  const auto r = x.rows(), c = x.cols();
  if (factors.size() != r) throw std::invalid_argument("scale_rows: one factor per row required");
  auto f = std::make_shared<std::vector<double>>(factors.begin(), factors.end());
  Buffer out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = in[i * c + j] * (*f)[i];
  return make_result(x.shape(), std::move(out), {x}, [c, f](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < f->size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j] * (*f)[i];
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  const auto r = x.rows(), c = x.cols();
  if (index.size() != r) throw std::invalid_argument("pick: one index per row required");
  Buffer out(r);
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  for (std::size_t i = 0; i < r; ++i) {
    if ((*idx)[i] >= c) throw std::out_of_range(fmt::format("pick: index {} >= {}", (*idx)[i], c));
    out[i] = x.data()[i * c + (*idx)[i]];
  }
  return make_result({r}, std::move(out), {x}, [c, idx](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) g[i * c + (*idx)[i]] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_rows(const Tensor& x) {
  const auto r = x.rows(), c = x.cols();
  Buffer out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  return make_result({c}, std::move(out), {x}, [r, c](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j];
  });
}

Tensor mean_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
  const auto r = x.rows(), c = x.cols();
  if (!mask.empty() && mask.size() != r) throw std::invalid_argument("mean_rows: mask length mismatch");
  auto weights = std::make_shared<std::vector<double>>(r, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < r; ++i) count += (mask.empty() || mask[i]) ? 1 : 0;
  if (count == 0) throw std::invalid_argument("mean_rows: no rows selected");
  for (std::size_t i = 0; i < r; ++i) {
    (*weights)[i] = (mask.empty() || mask[i]) ? 1.0 / static_cast<double>(count) : 0.0;
  }
  Buffer out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if ((*weights)[i] == 0.0) continue;
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  }
  for (auto& v : out) v /= static_cast<double>(count);
  return make_result({1, c}, std::move(out), {x}, [r, c, weights](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double w = (*weights)[i];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * self.grad[j];
    }
  });
}

Tensor squared_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return make_result({}, {s}, {x}, [](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * px.value[i] * self.grad[0];
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  const auto vsz = table.rows(), h = table.cols();
  if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  Buffer out(ids.size() * h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vsz) throw std::out_of_range(fmt::format("embedding: id {} >= {}", ids[i], vsz));
    std::copy_n(table.data().data() + ids[i] * h, h, out.data() + i * h);
  }
  return make_result(matrix_shape(ids.size(), h), std::move(out), {table}, [h, idx](Node& self) {
    auto& pt = parent(self, 0);
    if (!pt.requires_grad) return;
    auto& g = pt.grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < h; ++j) g[(*idx)[i] * h + j] += self.grad[i * h + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const auto c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Buffer out;
  out.reserve(total * c);
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) {
    offsets->push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return make_result(matrix_shape(total, c), std::move(out), std::move(parents), [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[(*offsets)[k] + i];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto r = x.rows(), c = x.cols();
  if (begin >= end || end > r) {
    throw std::out_of_range(fmt::format("slice_rows: [{}, {}) of {} rows", begin, end, r));
  }
  Buffer out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return make_result(matrix_shape(end - begin, c), std::move(out), {x}, [begin, c](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw std::invalid_argument(fmt::format("reshape: {} -> {}", shape_string(x.shape()), shape_string(shape)));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor straight_through(const Tensor& quantized, const Tensor& continuous) {
  require_same_shape(quantized, continuous, "straight_through");
  Buffer out(quantized.data().begin(), quantized.data().end());
  return make_result(quantized.shape(), std::move(out), {continuous}, [](Node& self) {
    auto& pc = parent(self, 0);
    if (!pc.requires_grad) return;
    auto& g = pc.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: probability must be < 1");
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : 0.0;
    out[i] = x.data()[i] * (*mask)[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [mask](Node& self) {
    auto& px = parent(self, 0);
    if (!px.requires_grad) return;
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

std::vector<double> log_softmax_temp(std::span<const double> logits, double tau) {
  check_tau(tau);
  if (logits.empty()) throw std::invalid_argument("softmax_temp: empty logits");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw NumericalError(fmt::format("softmax_temp: logit {} is not finite ({})", i, logits[i]));
    }
  }
  std::vector<double> out(logits.size());
  row_log_softmax(logits.data(), logits.size(), tau, out.data());
  return out;
}

std::vector<double> softmax_temp(std::span<const double> logits, double tau) {
  auto out = log_softmax_temp(logits, tau);
  for (auto& v : out) v = std::exp(v);
  return out;
}

}  // namespace slowrec::num
