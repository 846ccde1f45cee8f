// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major
// double-precision tensors. A Var is a cheap shared handle to a graph node;
// ops in ops.hpp build new nodes and record how to push gradients back to
// their inputs. Graph recording is controlled per thread, so read-only
// forward passes may run concurrently on shared parameters.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msiqa {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the node whose grad has been fully accumulated and adds its
// contribution into the grads of node.parents.
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  // Zero-filled on first access.
  double* grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<double> values);
  static Var zeros(Shape shape);
  static Var full(Shape shape, double value);
  static Var leaf(Shape shape, std::vector<double> values, bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  Index dim(std::size_t axis) const;
  Index numel() const;

  std::span<const double> values() const;
  // Direct mutation is meant for leaves (optimizers, loaders, tests).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Empty when no gradient has reached this node.
  std::span<const double> grad() const;
  void zero_grad();

  // Seeds d(self)/d(self) = 1; self must hold exactly one element.
  void backward() const;

  // Same values, no history.
  Var detach() const;
  Var clone() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. History is recorded only when grad mode is on and
// some input requires a gradient.
Var make_result(Shape shape, std::vector<double> value, std::initializer_list<Var> inputs,
                BackwardFn backward);
Var make_result(Shape shape, std::vector<double> value, const std::vector<Var>& inputs,
                BackwardFn backward);

}  // namespace msiqa
