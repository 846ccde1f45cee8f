// SPDX-License-Identifier: Apache-2.0
//
// Four-stage feature extractors. Both families take an NCHW image batch in
// [0,1] and emit four channel-first maps at strides 4, 8, 16 and 32:
//
//   residual50     bottleneck ResNet-50, stage channels (256, 512, 1024, 2048)
//   windowed_tiny  Swin-T shifted-window transformer, (96, 192, 384, 768)
//   toy_residual   one basic block per stage, default (8, 16, 32, 64)
//   toy_windowed   two windowed blocks per stage, default (4, 8, 16, 32)
//
// Parameter names follow the torchvision/timm layouts so converted
// checkpoints load without renaming.
#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "msiqa/parameters.hpp"
#include "msiqa/safetensors.hpp"

namespace msiqa::backbones {

enum class BackboneKind { residual50, windowed_tiny, toy_residual, toy_windowed };

std::string_view to_string(BackboneKind kind);
BackboneKind parse_backbone_kind(std::string_view text);
bool is_windowed(BackboneKind kind);

using StageChannels = std::array<Index, 4>;

struct BackboneSpec {
  BackboneKind kind = BackboneKind::toy_residual;
  StageChannels stage_channels{};
  std::optional<std::filesystem::path> checkpoint_path;
  // Attention window of the windowed family; 0 selects 7 (tiny) or 4 (toy).
  Index window_size = 0;

  static BackboneSpec defaults(BackboneKind kind);
  Index effective_window() const;
};

// Throws invalid_argument for channel vectors the architecture cannot have.
void validate(const BackboneSpec& spec);

struct StageFeatures {
  std::array<Var, 4> stages;  // stage i: (batch, C_i, H / 2^(i+1), W / 2^(i+1))
};

constexpr Index kSpatialMultiple = 32;

// Shape (N, 3, H, W), H and W multiples of 32, values finite in [0, 1].
void validate_input(const Var& images);

ParameterSet init_backbone_params(const BackboneSpec& spec, std::uint64_t seed);
ShapeManifest expected_parameters(const BackboneSpec& spec);

// Pure function of (images, params) in evaluation mode. With training set,
// batch-norm layers use batch statistics and update their running buffers.
StageFeatures extract_stages(const Var& images, const BackboneSpec& spec,
                             const ParameterSet& params, bool training = false);

// (batch, H·W, C) -> (batch, C, H, W), with H = W = sqrt(token count).
Var token_grid_to_channel_first(const Var& tokens);
Var token_grid_to_channel_first(const Var& tokens, Index height, Index width);
Var channel_first_to_token_grid(const Var& maps);

struct LoadedWeights {
  ParameterSet params;
  LoadReport report;
};

// Fresh parameters for `spec` overwritten by the file's tensors. Tensors may
// carry an optional "backbone." prefix.
LoadedWeights load_backbone_weights(const BackboneSpec& spec, const std::filesystem::path& path);
void save_backbone_weights(const BackboneSpec& spec, const ParameterSet& params,
                           const std::filesystem::path& path);

// Internal layout descriptions shared by the two families.
namespace detail {

enum class InitKind { conv_kaiming, ones, zeros, truncated_normal, linear_uniform };

struct TensorDecl {
  std::string name;
  Shape shape;
  InitKind init;
  bool trainable = true;
  Index fan_in = 0;
};
using Declare = std::function<void(TensorDecl)>;

void declare_residual(const BackboneSpec& spec, const Declare& declare);
void declare_windowed(const BackboneSpec& spec, const Declare& declare);

StageFeatures residual_forward(const Var& images, const BackboneSpec& spec,
                               const ParameterSet& params, bool training);
StageFeatures windowed_forward(const Var& images, const BackboneSpec& spec,
                               const ParameterSet& params);

}  // namespace detail

}  // namespace msiqa::backbones
