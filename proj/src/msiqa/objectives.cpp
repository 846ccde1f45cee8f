// SPDX-License-Identifier: Apache-2.0
#include "msiqa/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::objectives {

namespace {

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void require_pairs(std::span<const double> y, std::span<const double> t, std::size_t min_n,
                   const char* what) {
  if (y.size() != t.size()) {
    fail(ErrorCode::shape_mismatch, "{}: {} predictions for {} targets", what, y.size(), t.size());
  }
  if (y.size() < min_n) {
    fail(ErrorCode::invalid_argument, "{}: needs at least {} samples, got {}", what, min_n, y.size());
  }
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha > 0.0)) fail(ErrorCode::invalid_argument, "alpha must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0) fail(ErrorCode::invalid_argument, "loss weights must be non-negative");
}

double mse_loss(std::span<const double> y, std::span<const double> t) {
  require_pairs(y, t, 1, "mse_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) total += (y[i] - t[i]) * (y[i] - t[i]);
  return total / static_cast<double>(y.size());
}

double ranking_loss(std::span<const double> y, std::span<const double> t, double alpha) {
  require_pairs(y, t, 2, "ranking_loss");
  const std::size_t n = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double r = sigmoid(alpha * (t[i] - t[j])) - sigmoid(alpha * (y[i] - y[j]));
      total += r * r;
    }
  }
  return 2.0 * total / static_cast<double>(n * (n - 1));
}

double total_loss(std::span<const double> y, std::span<const double> t, const LossConfig& cfg) {
  cfg.validate();
  double out = cfg.lambda1 * mse_loss(y, t);
  if (cfg.lambda2 != 0.0) out += cfg.lambda2 * ranking_loss(y, t, cfg.alpha);
  return out;
}

Var mse_loss(const Var& y, std::span<const double> t) {
  const double value = mse_loss(y.values(), t);
  std::vector<double> targets(t.begin(), t.end());
  return make_result({}, {value}, {y}, [targets = std::move(targets)](Node& self) {
    Node& p = *self.parents[0];
    double* g = p.grad_buffer();
    const double k = 2.0 * self.grad[0] / static_cast<double>(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) g[i] += k * (p.value[i] - targets[i]);
  });
}

Var ranking_loss(const Var& y, std::span<const double> t, double alpha) {
  const double value = ranking_loss(y.values(), t, alpha);
  std::vector<double> targets(t.begin(), t.end());
  return make_result({}, {value}, {y}, [targets = std::move(targets), alpha](Node& self) {
    Node& p = *self.parents[0];
    double* g = p.grad_buffer();
    const std::size_t n = targets.size();
    const double c = 2.0 / static_cast<double>(n * (n - 1)) * self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double sy = sigmoid(alpha * (p.value[i] - p.value[j]));
        const double r = sigmoid(alpha * (targets[i] - targets[j])) - sy;
        // d/dy_i of r² through y_i − y_j
        const double d = c * 2.0 * r * (-sy * (1.0 - sy) * alpha);
        g[i] += d;
        g[j] -= d;
      }
    }
  });
}

Var total_loss(const Var& y, std::span<const double> t, const LossConfig& cfg) {
  cfg.validate();
  Var out = ops::scale(mse_loss(y, t), cfg.lambda1);
  if (cfg.lambda2 != 0.0) out = ops::add(out, ops::scale(ranking_loss(y, t, cfg.alpha), cfg.lambda2));
  return out;
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && x[order[j]] == x[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mean_rank;
    i = j;
  }
  return ranks;
}

double plcc(std::span<const double> y, std::span<const double> t) {
  require_pairs(y, t, 2, "plcc");
  const double n = static_cast<double>(y.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  const double mt = std::accumulate(t.begin(), t.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double a = y[i] - my, b = t[i] - mt;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) {
    fail(ErrorCode::undefined_metric, "correlation undefined: {} has zero variance",
         sxx == 0.0 ? "prediction vector" : "target vector");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double srocc(std::span<const double> y, std::span<const double> t) {
  require_pairs(y, t, 2, "srocc");
  const auto ry = average_ranks(y);
  const auto rt = average_ranks(t);
  return plcc(ry, rt);
}

}  // namespace msiqa::objectives
