// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/numerics/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include <fmt/format.h>

namespace slowrec::num {

namespace {

std::atomic<Precision> g_precision{Precision::f64};
thread_local bool t_grad_enabled = true;

}  // namespace

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }

double round_to_precision(double v) {
  if (g_precision.load(std::memory_order_relaxed) == Precision::f32) {
    return static_cast<double>(static_cast<float>(v));
  }
  return v;
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace {

std::shared_ptr<detail::Node> new_leaf(Shape shape, Buffer values,
                                       bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw std::invalid_argument(fmt::format("shape {} holds {} values, got {}", shape_string(shape),
                                            shape_size(shape), values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (precision() == Precision::f32) {
    for (auto& v : node->value) v = round_to_precision(v);
  }
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(new_leaf(std::move(shape), Buffer(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_size(shape);
  return Tensor(new_leaf(std::move(shape), Buffer(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), Buffer(values.begin(), values.end()), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  if (s.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

std::vector<double> Tensor::row(std::size_t r) const {
  auto c = cols();
  return {node_->value.begin() + static_cast<std::ptrdiff_t>(r * c),
          node_->value.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (size() != 1) {
    throw std::invalid_argument("backward() requires a single-element tensor, got " +
                                shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      auto* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (!n->backward) continue;
    if (!n->grad.empty()) n->backward(*n);
    // Interior gradients are single-use; releasing them keeps repeated
    // passes over a retained graph additive on leaves only.
    Buffer().swap(n->grad);
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

namespace detail {

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (precision() == Precision::f32) {
    for (auto& v : node->value) v = round_to_precision(v);
  }
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace detail

}  // namespace slowrec::num
