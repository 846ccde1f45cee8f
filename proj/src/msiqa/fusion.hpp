// SPDX-License-Identifier: Apache-2.0
//
// Multi-scale fusion of the two backbones' stage features.
//
// For each stage i the residual and windowed maps are concatenated along
// channels into F_i, globally averaged into a per-channel descriptor and
// reduced to width D. Each descriptor goes through its own graph channel
// attention block (AGCA):
//
//   f   = sigmoid(transform(f_in))          transform: affine D -> D
//   A   = diag(f) + A2                      A2: learned D x D adjacency
//   out = A · f_in
//
// The attended descriptors are concatenated into F_W; the global mean of the
// windowed backbone's last stage goes through a separate AGCA block into F_S.
// Both are max-pooled (non-overlapping window k) into f_w and f_s.
#pragma once

#include <array>
#include <optional>

#include "msiqa/backbones.hpp"
#include "msiqa/parameters.hpp"

namespace msiqa::fusion {

struct AgcaParams {
  Var transform_weight;  // (D, D)
  Var transform_bias;    // (D)
  Var adjacency;         // (D, D), unconstrained

  Index width() const { return adjacency.dim(0); }
};

struct LinearParams {
  Var weight;  // (out, in)
  Var bias;    // (out), or undefined for a bias-free map
};

struct FusionConfig {
  Index reduced_dim = 256;
  Index pool_kernel = 2;
  // Ablation switches.
  int stage_count = 4;      // stages 1..stage_count feed F_W
  bool use_attention = true;  // false: stage-4 descriptors go straight to pooling
};

struct FusionParams {
  std::array<LinearParams, 4> reductions;
  std::array<AgcaParams, 4> stage_agca;
  AgcaParams fs_agca;
};

struct FusedVectors {
  Var f_w;  // (B, stage_count·D / k)
  Var f_s;  // (B, C_s4 / k)
  Var feature_w;  // F_W before pooling
  Var feature_s;  // F_S before pooling
  std::array<Var, 4> fused_stages;  // F_1..F_4
};

// F_i = f_res ⊕ f_swin along channels.
Var concat_stage(const Var& f_res, const Var& f_swin);

// reduction(global spatial mean of each channel): (B, C, H, W) -> (B, D).
// The per-stage reductions built by init_fusion_params carry no bias.
Var channel_descriptor(const Var& stage, const LinearParams& reduction);

// f_in (D) -> (D, D), or (B, D) -> (B, D, D).
Var agca_attention_matrix(const Var& f_in, const AgcaParams& params);
// (B, D) -> (B, D): row-wise A · f_in.
Var agca_apply(const Var& f_in, const AgcaParams& params);

// Channel counts entering fusion. Either backbone may be absent (ablation).
struct FusionInputs {
  std::optional<backbones::StageChannels> residual;
  std::optional<backbones::StageChannels> windowed;

  backbones::StageChannels fused_channels() const;
  // Source of the F_S path: the windowed backbone's last stage, or the
  // residual one when the windowed backbone is disabled.
  Index score_channels() const;
};

struct FusionWidths {
  Index f_w;
  Index f_s;
};
FusionWidths fused_widths(const FusionInputs& inputs, const FusionConfig& cfg);

// Throws invalid_argument for a configuration that cannot be built.
void validate(const FusionInputs& inputs, const FusionConfig& cfg);

// Tensors named fusion.reduce.stage{i}.*, agca.stage{i}.* and agca.fs.*.
ParameterSet init_fusion_params(const FusionInputs& inputs, const FusionConfig& cfg,
                                std::uint64_t seed);
FusionParams fusion_view(const ParameterSet& params, const FusionConfig& cfg);

FusedVectors fuse(const backbones::StageFeatures* residual, const backbones::StageFeatures* windowed,
                  const FusionConfig& cfg, const FusionParams& params);

inline FusedVectors fuse(const backbones::StageFeatures& residual,
                         const backbones::StageFeatures& windowed, const FusionConfig& cfg,
                         const FusionParams& params) {
  return fuse(&residual, &windowed, cfg, params);
}

}  // namespace msiqa::fusion
