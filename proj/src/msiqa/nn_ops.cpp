// SPDX-License-Identifier: Apache-2.0
//
// Spatial ops on NCHW tensors.
#include <cmath>
#include <limits>

#include "msiqa/eigen_maps.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::ops {

namespace {

struct ConvGeometry {
  Index channels, height, width;
  Index kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;

  Index col_rows() const { return channels * kernel_h * kernel_w; }
  Index col_cols() const { return out_h * out_w; }
  bool is_pointwise() const {
    return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0;
  }
};

void im2col(const double* image, const ConvGeometry& g, double* col) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.col_cols();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = image + (c * g.height + ih) * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* image) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * g.col_cols();
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          double* dst = image + (c * g.height + ih) * g.width;
          const double* src = row + oh * g.out_w;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

void require_nchw(const Var& x, const char* op) {
  if (x.rank() != 4) {
    fail(ErrorCode::shape_mismatch, "{} expects an NCHW tensor, got {}", op,
         to_string(x.shape()));
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions options) {
  require_nchw(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    fail(ErrorCode::shape_mismatch, "conv2d: weight {} for input {}", to_string(weight.shape()),
         to_string(x.shape()));
  }
  const Index batch = x.dim(0);
  const Index out_channels = weight.dim(0);
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), options.stride,
                 options.padding, 0, 0};
  g.out_h = (g.height + 2 * g.padding - g.kernel_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kernel_w) / g.stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) {
    fail(ErrorCode::shape_mismatch, "conv2d: kernel larger than padded input {}",
         to_string(x.shape()));
  }
  if (bias.defined() && bias.numel() != out_channels) {
    fail(ErrorCode::shape_mismatch, "conv2d: bias of {} for {} filters", bias.numel(),
         out_channels);
  }

  const Index in_plane = g.channels * g.height * g.width;
  const Index out_plane = out_channels * g.col_cols();
  std::vector<double> out(static_cast<std::size_t>(batch * out_plane));
  std::vector<double> col(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  ConstMatrixMap w(weight.values().data(), out_channels, g.col_rows());
  for (Index n = 0; n < batch; ++n) {
    const double* image = x.values().data() + n * in_plane;
    if (!g.is_pointwise()) im2col(image, g, col.data());
    const double* cols = g.is_pointwise() ? image : col.data();
    MatrixMap y(out.data() + n * out_plane, out_channels, g.col_cols());
    y.noalias() = w * ConstMatrixMap(cols, g.col_rows(), g.col_cols());
    if (bias.defined()) {
      y.colwise() += ConstVectorMap(bias.values().data(), out_channels);
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result({batch, out_channels, g.out_h, g.out_w}, std::move(out), inputs,
                     [g, batch, out_channels, in_plane, out_plane](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       ConstMatrixMap w(pw.value.data(), out_channels, g.col_rows());
                       std::vector<double> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
                       for (Index n = 0; n < batch; ++n) {
                         ConstMatrixMap dy(self.grad.data() + n * out_plane, out_channels,
                                           g.col_cols());
                         if (pw.requires_grad) {
                           const double* image = px.value.data() + n * in_plane;
                           if (!g.is_pointwise()) im2col(image, g, col.data());
                           const double* cols = g.is_pointwise() ? image : col.data();
                           MatrixMap(pw.grad_buffer(), out_channels, g.col_rows()).noalias() +=
                               dy * ConstMatrixMap(cols, g.col_rows(), g.col_cols()).transpose();
                         }
                         if (px.requires_grad) {
                           double* dx = px.grad_buffer() + n * in_plane;
                           if (g.is_pointwise()) {
                             MatrixMap(dx, g.col_rows(), g.col_cols()).noalias() +=
                                 w.transpose() * dy;
                           } else {
                             MatrixMap(col.data(), g.col_rows(), g.col_cols()).noalias() =
                                 w.transpose() * dy;
                             col2im_add(col.data(), g, dx);
                           }
                         }
                         if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                           VectorMap(self.parents[2]->grad_buffer(), out_channels) +=
                               dy.rowwise().sum();
                         }
                       }
                     });
}

Var batch_norm2d(const Var& x, const BatchNormState& state, bool training, double momentum,
                 double eps) {
  require_nchw(x, "batch_norm2d");
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Var* v : {&state.gamma, &state.beta, &state.running_mean, &state.running_var}) {
    if (v->numel() != channels) {
      fail(ErrorCode::shape_mismatch, "batch_norm2d: {} channels, statistics of size {}",
           channels, v->numel());
    }
  }
  const auto xv = x.values();
  std::vector<double> mean(static_cast<std::size_t>(channels));
  std::vector<double> inv_std(static_cast<std::size_t>(channels));
  const Index count = batch * plane;
  if (training) {
    if (count < 2) fail(ErrorCode::invalid_argument, "batch_norm2d: training needs > 1 value per channel");
    auto rm = Var(state.running_mean).mutable_values();
    auto rv = Var(state.running_var).mutable_values();
    for (Index c = 0; c < channels; ++c) {
      double mu = 0.0;
      for (Index n = 0; n < batch; ++n) {
        const double* p = xv.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) mu += p[i];
      }
      mu /= static_cast<double>(count);
      double var = 0.0;
      for (Index n = 0; n < batch; ++n) {
        const double* p = xv.data() + (n * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const double biased = var / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(biased + eps);
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mu;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * var / static_cast<double>(count - 1);
    }
  } else {
    const auto rm = state.running_mean.values();
    const auto rv = state.running_var.values();
    for (Index c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + eps);
    }
  }

  const auto gamma = state.gamma.values();
  const auto beta = state.beta.values();
  std::vector<double> out(xv.size());
  for (Index n = 0; n < batch; ++n) {
    for (Index c = 0; c < channels; ++c) {
      const Index base = (n * channels + c) * plane;
      const double a = gamma[c] * inv_std[c];
      const double b = beta[c] - mean[c] * a;
      for (Index i = 0; i < plane; ++i) out[base + i] = xv[base + i] * a + b;
    }
  }

  return make_result(
      x.shape(), std::move(out), {x, state.gamma, state.beta},
      [batch, channels, plane, count, training, mean = std::move(mean),
       inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        for (Index c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_h = 0.0;
          for (Index n = 0; n < batch; ++n) {
            const Index base = (n * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              const double h = (px.value[base + i] - mean[c]) * inv_std[c];
              sum_dy += self.grad[base + i];
              sum_dy_h += self.grad[base + i] * h;
            }
          }
          if (pg.requires_grad) pg.grad_buffer()[c] += sum_dy_h;
          if (pb.requires_grad) pb.grad_buffer()[c] += sum_dy;
          if (!px.requires_grad) continue;
          double* gx = px.grad_buffer();
          const double a = pg.value[c] * inv_std[c];
          const double m = static_cast<double>(count);
          for (Index n = 0; n < batch; ++n) {
            const Index base = (n * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              const double dy = self.grad[base + i];
              if (training) {
                const double h = (px.value[base + i] - mean[c]) * inv_std[c];
                gx[base + i] += a / m * (m * dy - sum_dy - h * sum_dy_h);
              } else {
                gx[base + i] += a * dy;
              }
            }
          }
        }
      });
}

Var max_pool2d(const Var& x, Index kernel, Index stride, Index padding) {
  require_nchw(x, "max_pool2d");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = (h + 2 * padding - kernel) / stride + 1;
  const Index ow = (w + 2 * padding - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) fail(ErrorCode::shape_mismatch, "max_pool2d: input too small");
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(planes * oh * ow));
  auto argmax = std::make_shared<std::vector<Index>>(out.size());
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        Index where = -1;
        for (Index ki = 0; ki < kernel; ++ki) {
          const Index r = i * stride - padding + ki;
          if (r < 0 || r >= h) continue;
          for (Index kj = 0; kj < kernel; ++kj) {
            const Index c = j * stride - padding + kj;
            if (c < 0 || c >= w) continue;
            const Index src = (p * h + r) * w + c;
            if (where < 0 || xv[src] > best) {
              best = xv[src];
              where = src;
            }
          }
        }
        const Index dst = (p * oh + i) * ow + j;
        out[dst] = best;
        (*argmax)[dst] = where;
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, [argmax](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

Var global_avg_pool2d(const Var& x) {
  require_nchw(x, "global_avg_pool2d");
  const Index rows = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    double total = 0.0;
    for (Index i = 0; i < plane; ++i) total += xv[r * plane + i];
    out[r] = total / static_cast<double>(plane);
  }
  return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [rows, plane](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(plane);
    for (Index r = 0; r < rows; ++r) {
      for (Index i = 0; i < plane; ++i) g[r * plane + i] += self.grad[r] * inv;
    }
  });
}

}  // namespace msiqa::ops
