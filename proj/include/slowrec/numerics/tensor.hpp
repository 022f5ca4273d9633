// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared node. Operations executed while
// gradient recording is enabled (see NoGradGuard) link their result to the
// operands so that `backward()` on a scalar result can accumulate gradients
// into every leaf created with requires_grad. Intermediate gradients are
// released after each backward pass, so leaves may be accumulated over
// several graphs before an optimizer step.

#pragma once

#include <cstddef>
#include <cstdlib>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace slowrec::num {

enum class Precision { f32, f64 };

/// Global storage precision. In f32 mode every operation result is rounded
/// through single precision; arithmetic itself is carried out in double.
void set_precision(Precision p);
Precision precision();
double round_to_precision(double v);

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

/// Cache-line aligned allocator. Vectorized reductions peel by address, so
/// storage alignment must not vary between runs for results to be bitwise
/// reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    const auto bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    if (void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes)) return static_cast<T*>(p);
    throw std::bad_alloc();
  }
  void deallocate(T* p, std::size_t) { std::free(p); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t size() const;
  /// Product of all extents but the last (1 for rank <= 1).
  std::size_t rows() const;
  /// Last extent (1 for scalars).
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Direct access to the values. Intended for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> row(std::size_t r) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Accumulated gradient; empty span when nothing has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a single-element tensor, seeding d(self)/d(self) = 1.
  void backward() const;

  /// Same values, cut from the tape (stop-gradient).
  Tensor detach() const;
  /// Deep copy of the values into a fresh leaf with the same grad flag.
  Tensor clone() const;

  const detail::Node* id() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables tape recording for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

/// Builds an operation result. The backward closure runs only if the result
/// participates in a reverse pass; it receives the result node, whose
/// `grad` holds dL/d(result), and must accumulate into parents that
/// require gradients.
Tensor make_result(Shape shape, Buffer value,
                   std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace slowrec::num
