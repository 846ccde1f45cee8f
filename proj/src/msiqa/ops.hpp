// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops. All tensors are dense, row-major, float64.
// Image tensors are NCHW; token tensors are (batch, tokens, channels).
#pragma once

#include <memory>
#include <vector>

#include "msiqa/autograd.hpp"

namespace msiqa::ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// b is repeated over the leading axes of x: x.shape must end with b.shape.
Var add_broadcast(const Var& x, const Var& b);

Var scale(const Var& x, double factor);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var gelu(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// Sum of x ⊙ weights with weights held constant.
Var dot_constant(const Var& x, const std::vector<double>& weights);

Var reshape(const Var& x, Shape shape);

// out[i] = x[index[i]], or 0 where index[i] < 0. Covers permutations,
// strided slicing, padding and window partitioning.
using GatherIndex = std::shared_ptr<const std::vector<Index>>;
Var gather(const Var& x, GatherIndex index, Shape shape);

Var concat(const std::vector<Var>& parts, std::size_t axis);

// x (..., in) · weightᵀ (out, in) + bias (out).
Var linear(const Var& x, const Var& weight, const Var& bias = {});

// a (G, M, K) · b (G, K, N); with transpose_b, b is (G, N, K).
Var batched_matmul(const Var& a, const Var& b, bool transpose_b);

Var softmax_last(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Non-overlapping max pooling over the last axis (window = stride = k).
Var max_pool_last(const Var& x, Index k);

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};
// x (N, C, H, W), weight (O, C, kh, kw), optional bias (O).
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions options);

struct BatchNormState {
  Var gamma;
  Var beta;
  Var running_mean;
  Var running_var;
};
// Batch statistics (and running-stat update) when training, else running stats.
Var batch_norm2d(const Var& x, const BatchNormState& state, bool training,
                 double momentum = 0.1, double eps = 1e-5);

Var max_pool2d(const Var& x, Index kernel, Index stride, Index padding);

// (N, C, H, W) -> (N, C), mean over all spatial positions.
Var global_avg_pool2d(const Var& x);

}  // namespace msiqa::ops
