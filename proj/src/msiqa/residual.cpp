// SPDX-License-Identifier: Apache-2.0
//
// Residual-convolutional family. residual50 is torchvision's ResNet-50 (v1.5,
// stride on the 3x3 conv); the toy variant uses one basic block per stage
// behind a 3x3 stride-2 stem.
#include <fmt/format.h>

#include "msiqa/backbones.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::backbones::detail {

using msiqa::to_string;

namespace {

struct ResidualLayout {
  bool bottleneck;
  std::array<int, 4> blocks;
  Index stem_channels;
  Index stem_kernel;
};

ResidualLayout layout_for(const BackboneSpec& spec) {
  if (spec.kind == BackboneKind::residual50) return {true, {3, 4, 6, 3}, 64, 7};
  return {false, {1, 1, 1, 1}, spec.stage_channels[0], 3};
}

void declare_bn(const Declare& emit, const std::string& prefix, Index channels) {
  emit({prefix + ".weight", {channels}, InitKind::ones});
  emit({prefix + ".bias", {channels}, InitKind::zeros});
  emit({prefix + ".running_mean", {channels}, InitKind::zeros, false});
  emit({prefix + ".running_var", {channels}, InitKind::ones, false});
}

void declare_conv(const Declare& emit, const std::string& name, Index out, Index in, Index k) {
  emit({name, {out, in, k, k}, InitKind::conv_kaiming});
}

ops::BatchNormState bn_state(const ParameterSet& params, const std::string& prefix) {
  return {params.at(prefix + ".weight"), params.at(prefix + ".bias"),
          params.at(prefix + ".running_mean"), params.at(prefix + ".running_var")};
}

Var conv_bn(const Var& x, const ParameterSet& params, const std::string& conv,
            const std::string& bn, Index stride, Index padding, bool training) {
  const Var y = ops::conv2d(x, params.at(conv), {}, {stride, padding});
  return ops::batch_norm2d(y, bn_state(params, bn), training);
}

}  // namespace

void declare_residual(const BackboneSpec& spec, const Declare& emit) {
  const ResidualLayout layout = layout_for(spec);
  declare_conv(emit, "conv1.weight", layout.stem_channels, 3, layout.stem_kernel);
  declare_bn(emit, "bn1", layout.stem_channels);
  Index in = layout.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const Index out = spec.stage_channels[s];
    for (int b = 0; b < layout.blocks[s]; ++b) {
      const Index stride = (b == 0 && s > 0) ? 2 : 1;
      const std::string p = fmt::format("layer{}.{}.", s + 1, b);
      if (layout.bottleneck) {
        const Index mid = out / 4;
        declare_conv(emit, p + "conv1.weight", mid, in, 1);
        declare_bn(emit, p + "bn1", mid);
        declare_conv(emit, p + "conv2.weight", mid, mid, 3);
        declare_bn(emit, p + "bn2", mid);
        declare_conv(emit, p + "conv3.weight", out, mid, 1);
        declare_bn(emit, p + "bn3", out);
      } else {
        declare_conv(emit, p + "conv1.weight", out, in, 3);
        declare_bn(emit, p + "bn1", out);
        declare_conv(emit, p + "conv2.weight", out, out, 3);
        declare_bn(emit, p + "bn2", out);
      }
      if (stride != 1 || in != out) {
        declare_conv(emit, p + "downsample.0.weight", out, in, 1);
        declare_bn(emit, p + "downsample.1", out);
      }
      in = out;
    }
  }
}

StageFeatures residual_forward(const Var& images, const BackboneSpec& spec,
                               const ParameterSet& params, bool training) {
  const ResidualLayout layout = layout_for(spec);
  Var x = conv_bn(images, params, "conv1.weight", "bn1", 2, layout.stem_kernel / 2, training);
  x = ops::max_pool2d(ops::relu(x), 3, 2, 1);

  StageFeatures out;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < layout.blocks[s]; ++b) {
      const Index stride = (b == 0 && s > 0) ? 2 : 1;
      const std::string p = fmt::format("layer{}.{}.", s + 1, b);
      Var y;
      if (layout.bottleneck) {
        y = ops::relu(conv_bn(x, params, p + "conv1.weight", p + "bn1", 1, 0, training));
        y = ops::relu(conv_bn(y, params, p + "conv2.weight", p + "bn2", stride, 1, training));
        y = conv_bn(y, params, p + "conv3.weight", p + "bn3", 1, 0, training);
      } else {
        y = ops::relu(conv_bn(x, params, p + "conv1.weight", p + "bn1", stride, 1, training));
        y = conv_bn(y, params, p + "conv2.weight", p + "bn2", 1, 1, training);
      }
      const Var shortcut = params.contains(p + "downsample.0.weight")
                               ? conv_bn(x, params, p + "downsample.0.weight", p + "downsample.1",
                                         stride, 0, training)
                               : x;
      x = ops::relu(ops::add(y, shortcut));
    }
    out.stages[s] = x;
  }
  return out;
}

}  // namespace msiqa::backbones::detail
