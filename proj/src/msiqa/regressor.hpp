// SPDX-License-Identifier: Apache-2.0
//
// Two-branch score head: Score = S × W with
//   S = leaky(L_S2(leaky(L_S1(f_s))))
//   W = sigmoid(L_W2(leaky(L_W1(f_w))))
#pragma once

#include "msiqa/fusion.hpp"

namespace msiqa::regressor {

struct RegressorConfig {
  Index hidden = 128;
  double leaky_slope = 0.01;
  // Ablation: without the weight branch the score is S alone.
  bool use_weight_branch = true;
};

struct RegressorParams {
  fusion::LinearParams score1, score2;
  fusion::LinearParams weight1, weight2;
};

// Tensors named regressor.score.fc{1,2}.* and regressor.weight.fc{1,2}.*.
ParameterSet init_regressor_params(Index f_w_width, Index f_s_width, const RegressorConfig& cfg,
                                   std::uint64_t seed);
RegressorParams regressor_view(const ParameterSet& params, const RegressorConfig& cfg);

// (B, len f_s) -> (B, 1)
Var score_branch(const Var& f_s, const RegressorParams& params, double leaky_slope);
// (B, len f_w) -> (B, 1), values in (0, 1)
Var weight_branch(const Var& f_w, const RegressorParams& params, double leaky_slope);

struct Prediction {
  Var score;   // (B, 1)
  Var s;       // score branch
  Var w;       // weight branch; undefined when the branch is disabled
};

Prediction predict(const Var& f_w, const Var& f_s, const RegressorParams& params,
                   const RegressorConfig& cfg);

}  // namespace msiqa::regressor
