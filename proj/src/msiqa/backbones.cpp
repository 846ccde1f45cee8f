// SPDX-License-Identifier: Apache-2.0
#include "msiqa/backbones.hpp"

#include <cmath>

#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::backbones {

using msiqa::to_string;

std::string_view to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::residual50: return "residual50";
    case BackboneKind::windowed_tiny: return "windowed_tiny";
    case BackboneKind::toy_residual: return "toy_residual";
    case BackboneKind::toy_windowed: return "toy_windowed";
  }
  return "?";
}

BackboneKind parse_backbone_kind(std::string_view text) {
  for (auto kind : {BackboneKind::residual50, BackboneKind::windowed_tiny,
                    BackboneKind::toy_residual, BackboneKind::toy_windowed}) {
    if (text == to_string(kind)) return kind;
  }
  fail(ErrorCode::invalid_argument,
       "unknown backbone '{}' (expected residual50, windowed_tiny, toy_residual, toy_windowed)",
       text);
}

bool is_windowed(BackboneKind kind) {
  return kind == BackboneKind::windowed_tiny || kind == BackboneKind::toy_windowed;
}

BackboneSpec BackboneSpec::defaults(BackboneKind kind) {
  BackboneSpec spec;
  spec.kind = kind;
  switch (kind) {
    case BackboneKind::residual50: spec.stage_channels = {256, 512, 1024, 2048}; break;
    case BackboneKind::windowed_tiny: spec.stage_channels = {96, 192, 384, 768}; break;
    case BackboneKind::toy_residual: spec.stage_channels = {8, 16, 32, 64}; break;
    case BackboneKind::toy_windowed: spec.stage_channels = {4, 8, 16, 32}; break;
  }
  return spec;
}

Index BackboneSpec::effective_window() const {
  if (window_size > 0) return window_size;
  return kind == BackboneKind::windowed_tiny ? 7 : 4;
}

void validate(const BackboneSpec& spec) {
  for (Index c : spec.stage_channels) {
    if (c <= 0) fail(ErrorCode::invalid_argument, "{}: stage channels must be positive", to_string(spec.kind));
  }
  if (spec.kind == BackboneKind::residual50 || spec.kind == BackboneKind::windowed_tiny) {
    if (spec.stage_channels != BackboneSpec::defaults(spec.kind).stage_channels) {
      fail(ErrorCode::invalid_argument, "{} has fixed stage channels", to_string(spec.kind));
    }
  }
  if (spec.window_size < 0) fail(ErrorCode::invalid_argument, "negative window size");
}

void validate_input(const Var& images) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    fail(ErrorCode::shape_mismatch, "expected a (N, 3, H, W) image batch, got {}",
         to_string(images.shape()));
  }
  if (images.dim(0) < 1) fail(ErrorCode::shape_mismatch, "empty image batch");
  if (images.dim(2) % kSpatialMultiple != 0 || images.dim(3) % kSpatialMultiple != 0 ||
      images.dim(2) == 0 || images.dim(3) == 0) {
    fail(ErrorCode::shape_mismatch, "image size {}x{} is not a positive multiple of {}",
         images.dim(2), images.dim(3), kSpatialMultiple);
  }
  for (double v : images.values()) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      fail(ErrorCode::invalid_argument, "image values must be finite and within [0, 1]");
    }
  }
}

namespace {

void declare(const BackboneSpec& spec, const detail::Declare& emit) {
  validate(spec);
  emit({"input_mean", {3}, detail::InitKind::zeros, false});
  emit({"input_std", {3}, detail::InitKind::ones, false});
  if (is_windowed(spec.kind)) {
    detail::declare_windowed(spec, emit);
  } else {
    detail::declare_residual(spec, emit);
  }
}

Var normalize_input(const Var& images, const ParameterSet& params) {
  const auto mean = params.at("input_mean").values();
  const auto stddev = params.at("input_std").values();
  bool identity = true;
  for (int c = 0; c < 3; ++c) identity = identity && mean[c] == 0.0 && stddev[c] == 1.0;
  if (identity) return images;
  std::vector<double> scale(3), shift(3);
  for (int c = 0; c < 3; ++c) {
    if (!(stddev[c] > 0.0)) fail(ErrorCode::parameter_mismatch, "input_std must be positive");
    scale[c] = 1.0 / stddev[c];
    shift[c] = -mean[c] / stddev[c];
  }
  // Per-channel affine as a broadcast add over a constant (3, H, W) plane.
  const Index plane = images.dim(2) * images.dim(3);
  std::vector<double> scale_plane(static_cast<std::size_t>(3 * plane));
  std::vector<double> shift_plane(scale_plane.size());
  for (Index c = 0; c < 3; ++c) {
    std::fill_n(scale_plane.begin() + c * plane, plane, scale[c]);
    std::fill_n(shift_plane.begin() + c * plane, plane, shift[c]);
  }
  const Shape per_image{3, images.dim(2), images.dim(3)};
  std::vector<double> tiled(static_cast<std::size_t>(images.numel()));
  for (Index n = 0; n < images.dim(0); ++n) {
    std::copy(scale_plane.begin(), scale_plane.end(), tiled.begin() + n * 3 * plane);
  }
  Var scaled = ops::mul(images, Var::constant(images.shape(), std::move(tiled)));
  return ops::add_broadcast(scaled, Var::constant(per_image, std::move(shift_plane)));
}

}  // namespace

ParameterSet init_backbone_params(const BackboneSpec& spec, std::uint64_t seed) {
  init::Rng rng(seed);
  ParameterSet params;
  declare(spec, [&](detail::TensorDecl d) {
    const Index n = numel(d.shape);
    std::vector<double> values;
    switch (d.init) {
      case detail::InitKind::conv_kaiming: values = init::kaiming_normal_fan_out(rng, d.shape); break;
      case detail::InitKind::ones: values = init::constant(n, 1.0); break;
      case detail::InitKind::zeros: values = init::zeros(n); break;
      case detail::InitKind::truncated_normal: values = init::truncated_normal(rng, n, 0.02); break;
      case detail::InitKind::linear_uniform: values = init::uniform_fan_in(rng, n, d.fan_in); break;
    }
    params.add(std::move(d.name), std::move(d.shape), std::move(values), d.trainable);
  });
  return params;
}

ShapeManifest expected_parameters(const BackboneSpec& spec) {
  ShapeManifest out;
  declare(spec, [&](detail::TensorDecl d) { out.emplace_back(std::move(d.name), std::move(d.shape)); });
  return out;
}

StageFeatures extract_stages(const Var& images, const BackboneSpec& spec,
                             const ParameterSet& params, bool training) {
  validate_input(images);
  require_matches(params, expected_parameters(spec), to_string(spec.kind));
  const Var input = normalize_input(images, params);
  StageFeatures features = is_windowed(spec.kind)
                               ? detail::windowed_forward(input, spec, params)
                               : detail::residual_forward(input, spec, params, training);
  const Index h = images.dim(2), w = images.dim(3);
  for (std::size_t i = 0; i < 4; ++i) {
    const Var& s = features.stages[i];
    const Index div = Index{4} << i;
    if (s.rank() != 4 || s.dim(1) != spec.stage_channels[i] || s.dim(2) != h / div ||
        s.dim(3) != w / div) {
      fail(ErrorCode::internal, "stage {} produced {}", i + 1, to_string(s.shape()));
    }
  }
  return features;
}

Var token_grid_to_channel_first(const Var& tokens) {
  if (tokens.rank() != 3) {
    fail(ErrorCode::shape_mismatch, "expected (batch, tokens, channels), got {}",
         to_string(tokens.shape()));
  }
  const Index count = tokens.dim(1);
  const auto side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(count))));
  if (side * side != count) {
    fail(ErrorCode::shape_mismatch, "token count {} is not a perfect square", count);
  }
  return token_grid_to_channel_first(tokens, side, side);
}

Var token_grid_to_channel_first(const Var& tokens, Index height, Index width) {
  if (tokens.rank() != 3 || tokens.dim(1) != height * width) {
    fail(ErrorCode::shape_mismatch, "tokens {} do not form a {}x{} grid",
         to_string(tokens.shape()), height, width);
  }
  const Index batch = tokens.dim(0), channels = tokens.dim(2), plane = height * width;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(tokens.numel()));
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      for (Index p = 0; p < plane; ++p) {
        (*index)[(b * channels + c) * plane + p] = (b * plane + p) * channels + c;
      }
    }
  }
  return ops::gather(tokens, std::move(index), {batch, channels, height, width});
}

Var channel_first_to_token_grid(const Var& maps) {
  if (maps.rank() != 4) {
    fail(ErrorCode::shape_mismatch, "expected (batch, C, H, W), got {}", to_string(maps.shape()));
  }
  const Index batch = maps.dim(0), channels = maps.dim(1), plane = maps.dim(2) * maps.dim(3);
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(maps.numel()));
  for (Index b = 0; b < batch; ++b) {
    for (Index p = 0; p < plane; ++p) {
      for (Index c = 0; c < channels; ++c) {
        (*index)[(b * plane + p) * channels + c] = (b * channels + c) * plane + p;
      }
    }
  }
  return ops::gather(maps, std::move(index), {batch, plane, channels});
}

LoadedWeights load_backbone_weights(const BackboneSpec& spec, const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  if (const auto it = file.metadata.find("backbone_kind"); it != file.metadata.end()) {
    if (it->second != to_string(spec.kind)) {
      fail(ErrorCode::shape_mismatch, "'{}' holds a {} backbone, expected {}", path.string(),
           it->second, to_string(spec.kind));
    }
  }
  LoadedWeights out{init_backbone_params(spec, 0), {}};
  bool prefixed = false;
  for (const auto& t : file.tensors) prefixed = prefixed || t.name.starts_with("backbone.");
  out.report = load_into(out.params, file, prefixed ? "backbone." : "");
  return out;
}

void save_backbone_weights(const BackboneSpec& spec, const ParameterSet& params,
                           const std::filesystem::path& path) {
  require_matches(params, expected_parameters(spec), to_string(spec.kind));
  TensorFile file = to_tensor_file(params);
  file.metadata["backbone_kind"] = std::string(to_string(spec.kind));
  file.metadata["format"] = "msiqa-backbone-v1";
  write_tensor_file(path, file);
}

}  // namespace msiqa::backbones
