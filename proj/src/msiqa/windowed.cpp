// SPDX-License-Identifier: Apache-2.0
//
// Shifted-window transformer family, following torchvision's Swin (v1)
// semantics: features are zero-padded up to a multiple of the window, the
// shift is dropped when one window covers the padded grid, and odd blocks of
// a stage attend over cyclically shifted windows with a region mask.
#include <cmath>

#include <fmt/format.h>

#include "msiqa/backbones.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::backbones::detail {

using msiqa::to_string;

namespace {

constexpr Index kPatch = 4;
constexpr Index kMlpRatio = 4;
constexpr double kMaskValue = -100.0;

struct WindowedLayout {
  std::array<int, 4> depths;
  std::array<Index, 4> heads;
  Index window;
};

WindowedLayout layout_for(const BackboneSpec& spec) {
  if (spec.kind == BackboneKind::windowed_tiny) {
    return {{2, 2, 6, 2}, {3, 6, 12, 24}, spec.effective_window()};
  }
  WindowedLayout layout{{2, 2, 2, 2}, {1, 2, 2, 4}, spec.effective_window()};
  for (int s = 0; s < 4; ++s) {
    if (spec.stage_channels[s] % layout.heads[s] != 0) layout.heads[s] = 1;
  }
  return layout;
}

std::string block_prefix(int stage, int block) {
  return fmt::format("layers.{}.blocks.{}.", stage, block);
}

// Token grid (B, H·W, C) with its spatial extent.
struct Grid {
  Var tokens;
  Index batch, height, width, channels;
};

struct WindowGeometry {
  Index window, shift_h, shift_w;
  Index pad_h, pad_w;
  Index windows_h, windows_w;

  Index windows() const { return windows_h * windows_w; }
  Index tokens() const { return window * window; }
};

WindowGeometry window_geometry(Index height, Index width, Index window, Index shift) {
  WindowGeometry g{};
  g.window = window;
  g.pad_h = (height + window - 1) / window * window;
  g.pad_w = (width + window - 1) / window * window;
  g.shift_h = window >= g.pad_h ? 0 : shift;
  g.shift_w = window >= g.pad_w ? 0 : shift;
  g.windows_h = g.pad_h / window;
  g.windows_w = g.pad_w / window;
  return g;
}

// Pad, roll by -shift and split into windows: (B, H·W, C) -> (B·nW, N, C).
ops::GatherIndex partition_index(const Grid& grid, const WindowGeometry& g) {
  const Index n = g.tokens(), c = grid.channels;
  auto index = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(grid.batch * g.windows() * n * c));
  Index* out = index->data();
  for (Index b = 0; b < grid.batch; ++b) {
    for (Index wh = 0; wh < g.windows_h; ++wh) {
      for (Index ww = 0; ww < g.windows_w; ++ww) {
        for (Index i = 0; i < g.window; ++i) {
          for (Index j = 0; j < g.window; ++j) {
            const Index sh = (wh * g.window + i + g.shift_h) % g.pad_h;
            const Index sw = (ww * g.window + j + g.shift_w) % g.pad_w;
            const bool inside = sh < grid.height && sw < grid.width;
            const Index base = ((b * grid.height + sh) * grid.width + sw) * c;
            for (Index ch = 0; ch < c; ++ch) *out++ = inside ? base + ch : -1;
          }
        }
      }
    }
  }
  return index;
}

// Inverse of partition_index restricted to the unpadded grid.
ops::GatherIndex reverse_index(const Grid& grid, const WindowGeometry& g) {
  const Index n = g.tokens(), c = grid.channels;
  auto index = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(grid.batch * grid.height * grid.width * c));
  Index* out = index->data();
  for (Index b = 0; b < grid.batch; ++b) {
    for (Index h = 0; h < grid.height; ++h) {
      const Index ph = (h - g.shift_h + g.pad_h) % g.pad_h;
      for (Index w = 0; w < grid.width; ++w) {
        const Index pw = (w - g.shift_w + g.pad_w) % g.pad_w;
        const Index win = (b * g.windows_h + ph / g.window) * g.windows_w + pw / g.window;
        const Index base = (win * n + (ph % g.window) * g.window + pw % g.window) * c;
        for (Index ch = 0; ch < c; ++ch) *out++ = base + ch;
      }
    }
  }
  return index;
}

// (B·nW, N, 3C) -> one of q/k/v as (B·nW·heads, N, head_dim).
ops::GatherIndex split_heads_index(Index groups, Index n, Index channels, Index heads,
                                   Index which) {
  const Index hd = channels / heads;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(groups * n * channels));
  Index* out = index->data();
  for (Index g = 0; g < groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      for (Index t = 0; t < n; ++t) {
        for (Index d = 0; d < hd; ++d) {
          *out++ = (g * n + t) * 3 * channels + which * channels + h * hd + d;
        }
      }
    }
  }
  return index;
}

// (B·nW·heads, N, head_dim) -> (B·nW, N, C).
ops::GatherIndex merge_heads_index(Index groups, Index n, Index channels, Index heads) {
  const Index hd = channels / heads;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(groups * n * channels));
  Index* out = index->data();
  for (Index g = 0; g < groups; ++g) {
    for (Index t = 0; t < n; ++t) {
      for (Index h = 0; h < heads; ++h) {
        for (Index d = 0; d < hd; ++d) *out++ = ((g * heads + h) * n + t) * hd + d;
      }
    }
  }
  return index;
}

// Bias table ((2w-1)², heads) -> (heads, N, N).
ops::GatherIndex relative_bias_index(Index window, Index heads) {
  const Index n = window * window;
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(heads * n * n));
  for (Index h = 0; h < heads; ++h) {
    for (Index a = 0; a < n; ++a) {
      for (Index b = 0; b < n; ++b) {
        const Index dy = a / window - b / window + window - 1;
        const Index dx = a % window - b % window + window - 1;
        (*index)[(h * n + a) * n + b] = (dy * (2 * window - 1) + dx) * heads + h;
      }
    }
  }
  return index;
}

// Region mask for shifted windows, tiled over heads: (nW, heads, N, N).
Var shift_mask(const WindowGeometry& g, Index heads) {
  auto region = [](Index pos, Index pad, Index window, Index shift) -> Index {
    if (pos < pad - window) return 0;
    if (pos < pad - shift) return 1;
    return 2;
  };
  const Index n = g.tokens();
  std::vector<double> mask(static_cast<std::size_t>(g.windows() * heads * n * n));
  std::vector<Index> label(static_cast<std::size_t>(n));
  for (Index wh = 0; wh < g.windows_h; ++wh) {
    for (Index ww = 0; ww < g.windows_w; ++ww) {
      for (Index i = 0; i < g.window; ++i) {
        for (Index j = 0; j < g.window; ++j) {
          const Index rh = g.shift_h ? region(wh * g.window + i, g.pad_h, g.window, g.shift_h) : 0;
          const Index rw = g.shift_w ? region(ww * g.window + j, g.pad_w, g.window, g.shift_w) : 0;
          label[i * g.window + j] = rh * 3 + rw;
        }
      }
      const Index win = wh * g.windows_w + ww;
      for (Index h = 0; h < heads; ++h) {
        for (Index a = 0; a < n; ++a) {
          for (Index b = 0; b < n; ++b) {
            mask[((win * heads + h) * n + a) * n + b] = label[a] == label[b] ? 0.0 : kMaskValue;
          }
        }
      }
    }
  }
  return Var::constant({g.windows(), heads, n, n}, std::move(mask));
}

Var window_attention(const Grid& grid, const Var& normed, const ParameterSet& params,
                     const std::string& p, Index heads, Index window, Index shift) {
  const WindowGeometry g = window_geometry(grid.height, grid.width, window, shift);
  const Index c = grid.channels, n = g.tokens(), groups = grid.batch * g.windows();
  const Index hd = c / heads;

  const Var windows = ops::gather(normed, partition_index(grid, g), {groups, n, c});
  const Var qkv = ops::linear(windows, params.at(p + "attn.qkv.weight"), params.at(p + "attn.qkv.bias"));
  const Shape head_shape{groups * heads, n, hd};
  const Var q = ops::gather(qkv, split_heads_index(groups, n, c, heads, 0), head_shape);
  const Var k = ops::gather(qkv, split_heads_index(groups, n, c, heads, 1), head_shape);
  const Var v = ops::gather(qkv, split_heads_index(groups, n, c, heads, 2), head_shape);

  Var attn = ops::scale(ops::batched_matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
  attn = ops::reshape(attn, {groups, heads, n, n});
  const Var bias = ops::gather(params.at(p + "attn.relative_position_bias_table"),
                               relative_bias_index(window, heads), {heads, n, n});
  attn = ops::add_broadcast(attn, bias);
  if (g.shift_h || g.shift_w) {
    attn = ops::reshape(attn, {grid.batch, g.windows(), heads, n, n});
    attn = ops::add_broadcast(attn, shift_mask(g, heads));
  }
  attn = ops::softmax_last(ops::reshape(attn, {groups * heads, n, n}));

  Var out = ops::batched_matmul(attn, v, false);
  out = ops::gather(out, merge_heads_index(groups, n, c, heads), {groups, n, c});
  out = ops::linear(out, params.at(p + "attn.proj.weight"), params.at(p + "attn.proj.bias"));
  return ops::gather(out, reverse_index(grid, g), {grid.batch, grid.height * grid.width, c});
}

Var transformer_block(const Grid& grid, const ParameterSet& params, const std::string& p,
                      Index heads, Index window, Index shift) {
  const Var normed = ops::layer_norm(grid.tokens, params.at(p + "norm1.weight"), params.at(p + "norm1.bias"));
  Var x = ops::add(grid.tokens, window_attention(grid, normed, params, p, heads, window, shift));
  Var h = ops::layer_norm(x, params.at(p + "norm2.weight"), params.at(p + "norm2.bias"));
  h = ops::gelu(ops::linear(h, params.at(p + "mlp.fc1.weight"), params.at(p + "mlp.fc1.bias")));
  h = ops::linear(h, params.at(p + "mlp.fc2.weight"), params.at(p + "mlp.fc2.bias"));
  return ops::add(x, h);
}

// 2x2 neighbourhood merge: (B, H·W, C) -> (B, ⌈H/2⌉·⌈W/2⌉, C_next).
Grid patch_merge(const Grid& grid, const ParameterSet& params, const std::string& p,
                 Index next_channels) {
  const Index oh = (grid.height + 1) / 2, ow = (grid.width + 1) / 2, c = grid.channels;
  static constexpr Index kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(grid.batch * oh * ow * 4 * c));
  Index* out = index->data();
  for (Index b = 0; b < grid.batch; ++b) {
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        for (const auto& off : kOffsets) {
          const Index h = 2 * i + off[0], w = 2 * j + off[1];
          const bool inside = h < grid.height && w < grid.width;
          const Index base = ((b * grid.height + h) * grid.width + w) * c;
          for (Index ch = 0; ch < c; ++ch) *out++ = inside ? base + ch : -1;
        }
      }
    }
  }
  Var x = ops::gather(grid.tokens, std::move(index), {grid.batch, oh * ow, 4 * c});
  x = ops::layer_norm(x, params.at(p + "norm.weight"), params.at(p + "norm.bias"));
  x = ops::linear(x, params.at(p + "reduction.weight"));
  return {x, grid.batch, oh, ow, next_channels};
}

}  // namespace

void declare_windowed(const BackboneSpec& spec, const Declare& emit) {
  const WindowedLayout layout = layout_for(spec);
  const auto& ch = spec.stage_channels;
  const Index w = layout.window;
  emit({"patch_embed.proj.weight", {ch[0], 3, kPatch, kPatch}, InitKind::linear_uniform, true, 3 * kPatch * kPatch});
  emit({"patch_embed.proj.bias", {ch[0]}, InitKind::linear_uniform, true, 3 * kPatch * kPatch});
  emit({"patch_embed.norm.weight", {ch[0]}, InitKind::ones});
  emit({"patch_embed.norm.bias", {ch[0]}, InitKind::zeros});
  for (int s = 0; s < 4; ++s) {
    const Index c = ch[s];
    for (int b = 0; b < layout.depths[s]; ++b) {
      const std::string p = block_prefix(s, b);
      emit({p + "norm1.weight", {c}, InitKind::ones});
      emit({p + "norm1.bias", {c}, InitKind::zeros});
      emit({p + "attn.qkv.weight", {3 * c, c}, InitKind::truncated_normal});
      emit({p + "attn.qkv.bias", {3 * c}, InitKind::zeros});
      emit({p + "attn.proj.weight", {c, c}, InitKind::truncated_normal});
      emit({p + "attn.proj.bias", {c}, InitKind::zeros});
      emit({p + "attn.relative_position_bias_table", {(2 * w - 1) * (2 * w - 1), layout.heads[s]},
            InitKind::truncated_normal});
      emit({p + "norm2.weight", {c}, InitKind::ones});
      emit({p + "norm2.bias", {c}, InitKind::zeros});
      emit({p + "mlp.fc1.weight", {kMlpRatio * c, c}, InitKind::truncated_normal});
      emit({p + "mlp.fc1.bias", {kMlpRatio * c}, InitKind::zeros});
      emit({p + "mlp.fc2.weight", {c, kMlpRatio * c}, InitKind::truncated_normal});
      emit({p + "mlp.fc2.bias", {c}, InitKind::zeros});
    }
    if (s < 3) {
      const std::string p = fmt::format("layers.{}.downsample.", s);
      emit({p + "norm.weight", {4 * c}, InitKind::ones});
      emit({p + "norm.bias", {4 * c}, InitKind::zeros});
      emit({p + "reduction.weight", {ch[s + 1], 4 * c}, InitKind::truncated_normal});
    }
  }
}

StageFeatures windowed_forward(const Var& images, const BackboneSpec& spec,
                               const ParameterSet& params) {
  const WindowedLayout layout = layout_for(spec);
  const Index batch = images.dim(0);
  Var x = ops::conv2d(images, params.at("patch_embed.proj.weight"), params.at("patch_embed.proj.bias"),
                      {kPatch, 0});
  const Index height = x.dim(2), width = x.dim(3);
  x = channel_first_to_token_grid(x);
  x = ops::layer_norm(x, params.at("patch_embed.norm.weight"), params.at("patch_embed.norm.bias"));
  Grid grid{x, batch, height, width, spec.stage_channels[0]};

  StageFeatures out;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < layout.depths[s]; ++b) {
      const Index shift = (b % 2 == 1) ? layout.window / 2 : 0;
      grid.tokens = transformer_block(grid, params, block_prefix(s, b), layout.heads[s],
                                      layout.window, shift);
    }
    out.stages[s] = token_grid_to_channel_first(grid.tokens, grid.height, grid.width);
    if (s < 3) {
      grid = patch_merge(grid, params, fmt::format("layers.{}.downsample.", s),
                         spec.stage_channels[s + 1]);
    }
  }
  return out;
}

}  // namespace msiqa::backbones::detail
