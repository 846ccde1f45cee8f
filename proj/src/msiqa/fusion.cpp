// SPDX-License-Identifier: Apache-2.0
#include "msiqa/fusion.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::fusion {

Var concat_stage(const Var& f_res, const Var& f_swin) {
  if (f_res.rank() != 4 || f_swin.rank() != 4 || f_res.dim(0) != f_swin.dim(0) ||
      f_res.dim(2) != f_swin.dim(2) || f_res.dim(3) != f_swin.dim(3)) {
    fail(ErrorCode::shape_mismatch, "cannot concatenate stage maps {} and {}",
         to_string(f_res.shape()), to_string(f_swin.shape()));
  }
  return ops::concat({f_res, f_swin}, 1);
}

Var channel_descriptor(const Var& stage, const LinearParams& reduction) {
  if (stage.rank() != 4 || reduction.weight.rank() != 2 || reduction.weight.dim(1) != stage.dim(1)) {
    fail(ErrorCode::shape_mismatch, "descriptor reduction {} does not accept stage {}",
         to_string(reduction.weight.shape()), to_string(stage.shape()));
  }
  return ops::linear(ops::global_avg_pool2d(stage), reduction.weight, reduction.bias);
}

namespace {

void require_width(const Var& f_in, const AgcaParams& params) {
  const Index d = params.width();
  if (f_in.rank() < 1 || f_in.rank() > 2 || f_in.shape().back() != d ||
      params.transform_weight.shape() != Shape{d, d} || params.transform_bias.numel() != d ||
      params.adjacency.shape() != Shape{d, d}) {
    fail(ErrorCode::shape_mismatch, "AGCA block of width {} cannot take input {}", d,
         to_string(f_in.shape()));
  }
}

}  // namespace

Var agca_attention_matrix(const Var& f_in, const AgcaParams& params) {
  require_width(f_in, params);
  const Index d = params.width();
  const Index batch = f_in.rank() == 2 ? f_in.dim(0) : 1;
  const Var f = ops::sigmoid(ops::linear(f_in, params.transform_weight, params.transform_bias));
  // diag(f): every row of A1 is f, and only its diagonal survives A0 × A1.
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(batch * d * d), -1);
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < d; ++i) (*index)[(b * d + i) * d + i] = b * d + i;
  }
  Shape shape = f_in.rank() == 2 ? Shape{batch, d, d} : Shape{d, d};
  return ops::add_broadcast(ops::gather(f, std::move(index), std::move(shape)), params.adjacency);
}

Var agca_apply(const Var& f_in, const AgcaParams& params) {
  require_width(f_in, params);
  const Var f = ops::sigmoid(ops::linear(f_in, params.transform_weight, params.transform_bias));
  // (diag(f) + A2) · f_in = f ⊙ f_in + A2 · f_in
  return ops::add(ops::mul(f, f_in), ops::linear(f_in, params.adjacency));
}

backbones::StageChannels FusionInputs::fused_channels() const {
  backbones::StageChannels out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = (residual ? (*residual)[i] : 0) + (windowed ? (*windowed)[i] : 0);
  }
  return out;
}

Index FusionInputs::score_channels() const {
  if (windowed) return (*windowed)[3];
  if (residual) return (*residual)[3];
  return 0;
}

FusionWidths fused_widths(const FusionInputs& inputs, const FusionConfig& cfg) {
  const Index k = std::max<Index>(cfg.pool_kernel, 1);
  if (!cfg.use_attention) return {inputs.fused_channels()[3] / k, inputs.score_channels() / k};
  return {cfg.stage_count * cfg.reduced_dim / k, inputs.score_channels() / k};
}

void validate(const FusionInputs& inputs, const FusionConfig& cfg) {
  if (!inputs.residual && !inputs.windowed) {
    fail(ErrorCode::invalid_argument, "fusion needs at least one backbone");
  }
  if (cfg.stage_count < 1 || cfg.stage_count > 4) {
    fail(ErrorCode::invalid_argument, "stage count {} outside 1..4", cfg.stage_count);
  }
  if (cfg.pool_kernel <= 0) fail(ErrorCode::invalid_argument, "pool kernel must be positive");
  const auto channels = inputs.fused_channels();
  const Index w_width = cfg.use_attention ? cfg.stage_count * cfg.reduced_dim : channels[3];
  const Index s_width = inputs.score_channels();
  if (w_width % cfg.pool_kernel != 0 || s_width % cfg.pool_kernel != 0) {
    fail(ErrorCode::invalid_argument, "pool kernel {} does not divide fused widths {} and {}",
         cfg.pool_kernel, w_width, s_width);
  }
  if (cfg.use_attention && cfg.reduced_dim <= 0) {
    fail(ErrorCode::invalid_argument, "reduced width must be positive, got {}", cfg.reduced_dim);
  }
}

ParameterSet init_fusion_params(const FusionInputs& inputs, const FusionConfig& cfg,
                                std::uint64_t seed) {
  validate(inputs, cfg);
  ParameterSet params;
  if (!cfg.use_attention) return params;
  init::Rng rng(seed);
  const auto channels = inputs.fused_channels();
  const Index d = cfg.reduced_dim;
  auto add_agca = [&](const std::string& prefix, Index width) {
    params.add(prefix + ".transform.weight", {width, width}, init::uniform_fan_in(rng, width * width, width));
    params.add(prefix + ".transform.bias", {width}, init::uniform_fan_in(rng, width, width));
    params.add(prefix + ".adjacency", {width, width}, init::zeros(width * width));
  };
  for (int i = 0; i < cfg.stage_count; ++i) {
    const std::string p = fmt::format("fusion.reduce.stage{}", i + 1);
    params.add(p + ".weight", {d, channels[i]}, init::uniform_fan_in(rng, d * channels[i], channels[i]));
    add_agca(fmt::format("agca.stage{}", i + 1), d);
  }
  add_agca("agca.fs", inputs.score_channels());
  return params;
}

FusionParams fusion_view(const ParameterSet& params, const FusionConfig& cfg) {
  FusionParams view;
  if (!cfg.use_attention) return view;
  auto agca = [&](const std::string& prefix) {
    return AgcaParams{params.at(prefix + ".transform.weight"), params.at(prefix + ".transform.bias"),
                      params.at(prefix + ".adjacency")};
  };
  for (int i = 0; i < cfg.stage_count; ++i) {
    const std::string p = fmt::format("fusion.reduce.stage{}", i + 1);
    view.reductions[i] = {params.at(p + ".weight"), {}};
    view.stage_agca[i] = agca(fmt::format("agca.stage{}", i + 1));
  }
  view.fs_agca = agca("agca.fs");
  return view;
}

FusedVectors fuse(const backbones::StageFeatures* residual, const backbones::StageFeatures* windowed,
                  const FusionConfig& cfg, const FusionParams& params) {
  if (!residual && !windowed) fail(ErrorCode::invalid_argument, "fusion needs at least one backbone");
  if (cfg.pool_kernel <= 0) fail(ErrorCode::invalid_argument, "pool kernel must be positive");
  FusedVectors out;
  for (std::size_t i = 0; i < 4; ++i) {
    if (residual && windowed) {
      out.fused_stages[i] = concat_stage(residual->stages[i], windowed->stages[i]);
    } else {
      out.fused_stages[i] = residual ? residual->stages[i] : windowed->stages[i];
    }
  }
  const Var& score_source = windowed ? windowed->stages[3] : residual->stages[3];

  if (cfg.use_attention) {
    std::vector<Var> attended;
    for (int i = 0; i < cfg.stage_count; ++i) {
      attended.push_back(
          agca_apply(channel_descriptor(out.fused_stages[i], params.reductions[i]), params.stage_agca[i]));
    }
    out.feature_w = ops::concat(attended, 1);
    out.feature_s = agca_apply(ops::global_avg_pool2d(score_source), params.fs_agca);
  } else {
    out.feature_w = ops::global_avg_pool2d(out.fused_stages[3]);
    out.feature_s = ops::global_avg_pool2d(score_source);
  }
  const Index w_width = out.feature_w.shape().back(), s_width = out.feature_s.shape().back();
  if (w_width % cfg.pool_kernel != 0 || s_width % cfg.pool_kernel != 0) {
    fail(ErrorCode::invalid_argument, "pool kernel {} does not divide fused widths {} and {}",
         cfg.pool_kernel, w_width, s_width);
  }
  out.f_w = ops::max_pool_last(out.feature_w, cfg.pool_kernel);
  out.f_s = ops::max_pool_last(out.feature_s, cfg.pool_kernel);
  return out;
}

}  // namespace msiqa::fusion
