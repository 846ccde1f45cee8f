// SPDX-License-Identifier: Apache-2.0
#include "msiqa/regressor.hpp"

#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::regressor {

namespace {

void add_linear(ParameterSet& params, init::Rng& rng, const std::string& prefix, Index in, Index out) {
  params.add(prefix + ".weight", {out, in}, init::uniform_fan_in(rng, out * in, in));
  params.add(prefix + ".bias", {out}, init::uniform_fan_in(rng, out, in));
}

fusion::LinearParams linear_view(const ParameterSet& params, const std::string& prefix) {
  return {params.at(prefix + ".weight"), params.at(prefix + ".bias")};
}

Var apply(const Var& x, const fusion::LinearParams& layer) {
  if (x.rank() != 2 || layer.weight.dim(1) != x.dim(1)) {
    fail(ErrorCode::shape_mismatch, "regressor layer {} cannot take input {}",
         to_string(layer.weight.shape()), to_string(x.shape()));
  }
  return ops::linear(x, layer.weight, layer.bias);
}

}  // namespace

ParameterSet init_regressor_params(Index f_w_width, Index f_s_width, const RegressorConfig& cfg,
                                   std::uint64_t seed) {
  if (cfg.hidden <= 0) fail(ErrorCode::invalid_argument, "hidden width must be positive");
  init::Rng rng(seed);
  ParameterSet params;
  add_linear(params, rng, "regressor.score.fc1", f_s_width, cfg.hidden);
  add_linear(params, rng, "regressor.score.fc2", cfg.hidden, 1);
  if (cfg.use_weight_branch) {
    add_linear(params, rng, "regressor.weight.fc1", f_w_width, cfg.hidden);
    add_linear(params, rng, "regressor.weight.fc2", cfg.hidden, 1);
  }
  return params;
}

RegressorParams regressor_view(const ParameterSet& params, const RegressorConfig& cfg) {
  RegressorParams view;
  view.score1 = linear_view(params, "regressor.score.fc1");
  view.score2 = linear_view(params, "regressor.score.fc2");
  if (cfg.use_weight_branch) {
    view.weight1 = linear_view(params, "regressor.weight.fc1");
    view.weight2 = linear_view(params, "regressor.weight.fc2");
  }
  return view;
}

Var score_branch(const Var& f_s, const RegressorParams& params, double leaky_slope) {
  const Var hidden = ops::leaky_relu(apply(f_s, params.score1), leaky_slope);
  return ops::leaky_relu(apply(hidden, params.score2), leaky_slope);
}

Var weight_branch(const Var& f_w, const RegressorParams& params, double leaky_slope) {
  const Var hidden = ops::leaky_relu(apply(f_w, params.weight1), leaky_slope);
  return ops::sigmoid(apply(hidden, params.weight2));
}

Prediction predict(const Var& f_w, const Var& f_s, const RegressorParams& params,
                   const RegressorConfig& cfg) {
  Prediction out;
  out.s = score_branch(f_s, params, cfg.leaky_slope);
  if (!cfg.use_weight_branch) {
    out.score = out.s;
    return out;
  }
  out.w = weight_branch(f_w, params, cfg.leaky_slope);
  if (out.w.dim(0) != out.s.dim(0)) {
    fail(ErrorCode::shape_mismatch, "branch batch sizes differ: {} vs {}", out.w.dim(0), out.s.dim(0));
  }
  out.score = ops::mul(out.s, out.w);
  return out;
}

}  // namespace msiqa::regressor
