// SPDX-License-Identifier: Apache-2.0
#include "msiqa/parameters.hpp"

#include <cmath>

#include "msiqa/errors.hpp"

namespace msiqa {

Var ParameterSet::add(std::string name, Shape shape, std::vector<double> values, bool trainable) {
  Var var = Var::leaf(std::move(shape), std::move(values), trainable);
  adopt(std::move(name), var, trainable);
  return var;
}

void ParameterSet::adopt(std::string name, Var var, bool trainable) {
  if (lookup_.contains(name)) fail(ErrorCode::internal, "duplicate parameter name '{}'", name);
  lookup_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(var), trainable});
}

bool ParameterSet::contains(std::string_view name) const {
  return lookup_.contains(std::string(name));
}

const Var& ParameterSet::at(std::string_view name) const {
  const auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) fail(ErrorCode::parameter_mismatch, "missing parameter '{}'", name);
  return entries_[it->second].var;
}

Index ParameterSet::scalar_count() const {
  Index total = 0;
  for (const auto& p : entries_) total += p.var.numel();
  return total;
}

std::vector<Var> ParameterSet::trainable_vars() const {
  std::vector<Var> out;
  for (const auto& p : entries_) {
    if (p.trainable && p.var.requires_grad()) out.push_back(p.var);
  }
  return out;
}

void ParameterSet::merge(const ParameterSet& other, std::string_view prefix) {
  for (const auto& p : other.entries_) adopt(std::string(prefix) + p.name, p.var, p.trainable);
}

ParameterSet ParameterSet::slice(std::string_view prefix) const {
  ParameterSet out;
  for (const auto& p : entries_) {
    if (p.name.starts_with(prefix)) out.adopt(p.name.substr(prefix.size()), p.var, p.trainable);
  }
  return out;
}

void ParameterSet::set_requires_grad(bool flag) {
  for (auto& p : entries_) {
    if (p.trainable) p.var.set_requires_grad(flag);
  }
}

void ParameterSet::zero_grad() {
  for (auto& p : entries_) p.var.zero_grad();
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& p : entries_) out.adopt(p.name, p.var.clone(), p.trainable);
  return out;
}

ShapeManifest shape_manifest(const ParameterSet& params) {
  ShapeManifest out;
  out.reserve(params.size());
  for (const auto& p : params.entries()) out.emplace_back(p.name, p.var.shape());
  return out;
}

void require_matches(const ParameterSet& params, const ShapeManifest& expected,
                     std::string_view what) {
  if (params.size() != expected.size()) {
    fail(ErrorCode::parameter_mismatch, "{}: expected {} tensors, parameter set has {}", what,
         expected.size(), params.size());
  }
  for (const auto& [name, shape] : expected) {
    if (!params.contains(name)) {
      fail(ErrorCode::parameter_mismatch, "{}: parameter '{}' missing", what, name);
    }
    const Var& v = params.at(name);
    if (v.shape() != shape) {
      fail(ErrorCode::parameter_mismatch, "{}: parameter '{}' has shape {}, expected {}", what,
           name, to_string(v.shape()), to_string(shape));
    }
  }
}

namespace init {

std::vector<double> zeros(Index n) { return std::vector<double>(static_cast<std::size_t>(n), 0.0); }

std::vector<double> constant(Index n, double value) {
  return std::vector<double>(static_cast<std::size_t>(n), value);
}

std::vector<double> kaiming_normal_fan_out(Rng& rng, const Shape& conv_shape) {
  const Index fan_out = conv_shape[0] * conv_shape[2] * conv_shape[3];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
  std::vector<double> out(static_cast<std::size_t>(numel(conv_shape)));
  for (double& v : out) v = dist(rng);
  return out;
}

std::vector<double> truncated_normal(Rng& rng, Index n, double std) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (double& v : out) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = z * std;
  }
  return out;
}

std::vector<double> uniform_fan_in(Rng& rng, Index n, Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (double& v : out) v = dist(rng);
  return out;
}

}  // namespace init

}  // namespace msiqa
