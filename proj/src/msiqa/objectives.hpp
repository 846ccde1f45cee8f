// SPDX-License-Identifier: Apache-2.0
//
// Training losses and rank/linear correlation metrics.
//
//   mse      = 1/n Σ (y_i − t_i)²
//   ranking  = 2/(n(n−1)) Σ_{i<j} (σ(α(t_i − t_j)) − σ(α(y_i − y_j)))²
//   total    = λ1·mse + λ2·ranking
#pragma once

#include <span>
#include <vector>

#include "msiqa/autograd.hpp"

namespace msiqa::objectives {

struct LossConfig {
  double alpha = 2.0;
  double lambda1 = 0.5;
  double lambda2 = 0.5;

  void validate() const;
};

double mse_loss(std::span<const double> y, std::span<const double> t);
double ranking_loss(std::span<const double> y, std::span<const double> t, double alpha);
double total_loss(std::span<const double> y, std::span<const double> t, const LossConfig& cfg);

// Differentiable in the predictions y (any shape with n elements).
Var mse_loss(const Var& y, std::span<const double> t);
Var ranking_loss(const Var& y, std::span<const double> t, double alpha);
Var total_loss(const Var& y, std::span<const double> t, const LossConfig& cfg);

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> x);

// Throw undefined_metric when either side has zero variance.
double plcc(std::span<const double> y, std::span<const double> t);
double srocc(std::span<const double> y, std::span<const double> t);

}  // namespace msiqa::objectives
