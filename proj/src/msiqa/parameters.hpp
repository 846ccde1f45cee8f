// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "msiqa/autograd.hpp"

namespace msiqa {

struct Parameter {
  std::string name;
  Var var;
  // Buffers such as batch-norm running statistics are stored but not optimized.
  bool trainable = true;
};

// Ordered collection of named tensors. Copies share the underlying Vars.
class ParameterSet {
 public:
  Var add(std::string name, Shape shape, std::vector<double> values, bool trainable = true);
  void adopt(std::string name, Var var, bool trainable);

  bool contains(std::string_view name) const;
  // Throws parameter_mismatch if absent.
  const Var& at(std::string_view name) const;
  const std::vector<Parameter>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index scalar_count() const;

  std::vector<Var> trainable_vars() const;

  // Adds every entry of `other` as `prefix + name`, sharing storage.
  void merge(const ParameterSet& other, std::string_view prefix);

  // Entries whose name starts with `prefix`, with the prefix removed.
  ParameterSet slice(std::string_view prefix) const;

  void set_requires_grad(bool flag);
  void zero_grad();

  // Deep copy with independent storage.
  ParameterSet clone() const;

 private:
  std::vector<Parameter> entries_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// Expected (name, shape) pairs of a module, used for validation.
using ShapeManifest = std::vector<std::pair<std::string, Shape>>;
ShapeManifest shape_manifest(const ParameterSet& params);
// Throws parameter_mismatch naming the first disagreement.
void require_matches(const ParameterSet& params, const ShapeManifest& expected,
                     std::string_view what);

namespace init {

using Rng = std::mt19937_64;

std::vector<double> zeros(Index n);
std::vector<double> constant(Index n, double value);
// He normal with fan_out = out_channels * kh * kw.
std::vector<double> kaiming_normal_fan_out(Rng& rng, const Shape& conv_shape);
// Normal(0, std) truncated to ±2 std.
std::vector<double> truncated_normal(Rng& rng, Index n, double std);
// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
std::vector<double> uniform_fan_in(Rng& rng, Index n, Index fan_in);

}  // namespace init

}  // namespace msiqa
