// SPDX-License-Identifier: Apache-2.0
#include "msiqa/autograd.hpp"

#include <unordered_set>
#include <utility>

#include "msiqa/errors.hpp"

namespace msiqa {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

double* Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

Var Var::constant(Shape shape, std::vector<double> values) {
  return leaf(std::move(shape), std::move(values), false);
}

Var Var::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Var Var::full(Shape shape, double value) {
  const auto n = static_cast<std::size_t>(msiqa::numel(shape));
  return leaf(std::move(shape), std::vector<double>(n, value), false);
}

Var Var::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<Index>(values.size()) != msiqa::numel(shape)) {
    fail(ErrorCode::shape_mismatch, "tensor of shape {} cannot hold {} values", to_string(shape),
         values.size());
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

const Shape& Var::shape() const { return node_->shape; }

Index Var::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    fail(ErrorCode::shape_mismatch, "axis {} out of range for shape {}", axis,
         to_string(node_->shape));
  }
  return node_->shape[axis];
}

Index Var::numel() const { return static_cast<Index>(node_->value.size()); }

std::span<const double> Var::values() const { return node_->value; }

std::span<double> Var::mutable_values() { return node_->value; }

double Var::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorCode::shape_mismatch, "item() on tensor of shape {}", to_string(node_->shape));
  }
  return node_->value.front();
}

bool Var::requires_grad() const { return node_->requires_grad; }

void Var::set_requires_grad(bool flag) { node_->requires_grad = flag; }

std::span<const double> Var::grad() const { return node_->grad; }

void Var::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Var::backward() const {
  if (node_->value.size() != 1) {
    fail(ErrorCode::shape_mismatch, "backward() needs a scalar, got shape {}",
         to_string(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversed it is a valid reverse-topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    // Interior gradients are dead once propagated.
    std::vector<double>().swap(node->grad);
  }
}

Var Var::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Var(std::move(node));
}

Var Var::clone() const {
  Var copy = detach();
  copy.set_requires_grad(node_->requires_grad);
  return copy;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Shape shape, std::vector<double> value, const std::vector<Var>& inputs,
                BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Var& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

Var make_result(Shape shape, std::vector<double> value, std::initializer_list<Var> inputs,
                BackwardFn backward) {
  return make_result(std::move(shape), std::move(value), std::vector<Var>(inputs),
                     std::move(backward));
}

}  // namespace msiqa
