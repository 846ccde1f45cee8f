// SPDX-License-Identifier: Apache-2.0
#include "msiqa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "msiqa/eigen_maps.hpp"
#include "msiqa/errors.hpp"

namespace msiqa::ops {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::shape_mismatch, "{}: shapes {} and {} differ", op, to_string(a.shape()),
         to_string(b.shape()));
  }
}

// Applies y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    Node& p = *self.parents[0];
    double* g = p.grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    }
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      double* g = p->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      double* g = p.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      double* g = pa.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      double* g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var add_broadcast(const Var& x, const Var& b) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    fail(ErrorCode::shape_mismatch, "add_broadcast: {} is not a suffix of {}", to_string(bs),
         to_string(xs));
  }
  const auto period = static_cast<std::size_t>(b.numel());
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % period];
  return make_result(xs, std::move(out), {x, b}, [period](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      double* g = px.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      double* g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % period] += self.grad[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
      });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    double* g = p.grad_buffer();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  if (x.numel() == 0) fail(ErrorCode::shape_mismatch, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Var dot_constant(const Var& x, const std::vector<double>& weights) {
  if (static_cast<Index>(weights.size()) != x.numel()) {
    fail(ErrorCode::shape_mismatch, "dot_constant: {} weights for {} values", weights.size(),
         x.numel());
  }
  double total = 0.0;
  const auto xv = x.values();
  for (std::size_t i = 0; i < weights.size(); ++i) total += xv[i] * weights[i];
  return make_result({}, {total}, {x}, [weights](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < weights.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    fail(ErrorCode::shape_mismatch, "reshape {} -> {}", to_string(x.shape()), to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Var gather(const Var& x, GatherIndex index, Shape shape) {
  if (static_cast<Index>(index->size()) != numel(shape)) {
    fail(ErrorCode::shape_mismatch, "gather: {} indices for output shape {}", index->size(),
         to_string(shape));
  }
  const auto xv = x.values();
  const Index n = x.numel();
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Index src = (*index)[i];
    if (src >= n) fail(ErrorCode::internal, "gather index {} out of range {}", src, n);
    out[i] = src >= 0 ? xv[static_cast<std::size_t>(src)] : 0.0;
  }
  return make_result(std::move(shape), std::move(out), {x}, [index](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Index src = (*index)[i];
      if (src >= 0) g[src] += self.grad[i];
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) fail(ErrorCode::shape_mismatch, "concat axis {} out of range", axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      fail(ErrorCode::shape_mismatch, "concat along axis {}: {} vs {}", axis, to_string(first),
           to_string(s));
    }
    out_shape[axis] += s[axis];
  }
  Index outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::vector<Index> block(parts.size());
  Index out_block = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    block[k] = parts[k].numel() / std::max<Index>(outer, 1);
    out_block += block[k];
  }
  std::vector<double> out(static_cast<std::size_t>(outer * out_block));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * block[k], block[k], out.begin() + o * out_block + offset);
    }
    offset += block[k];
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [block, outer, out_block](Node& self) {
                       Index offset = 0;
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Node& p = *self.parents[k];
                         if (p.requires_grad) {
                           double* g = p.grad_buffer();
                           for (Index o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * out_block + offset;
                             for (Index i = 0; i < block[k]; ++i) g[o * block[k] + i] += src[i];
                           }
                         }
                         offset += block[k];
                       }
                     });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.dim(1)) {
    fail(ErrorCode::shape_mismatch, "linear: input {} incompatible with weight {}",
         to_string(x.shape()), to_string(weight.shape()));
  }
  const Index in = weight.dim(1);
  const Index out_features = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_features)) {
    fail(ErrorCode::shape_mismatch, "linear: bias {} for {} outputs", to_string(bias.shape()),
         out_features);
  }
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  std::vector<double> out(static_cast<std::size_t>(rows * out_features));
  {
    MatrixMap y(out.data(), rows, out_features);
    y.noalias() = ConstMatrixMap(x.values().data(), rows, in) *
                  ConstMatrixMap(weight.values().data(), out_features, in).transpose();
    if (bias.defined()) {
      y.rowwise() += ConstVectorMap(bias.values().data(), out_features).transpose();
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out_shape), std::move(out), inputs,
                     [rows, in, out_features](Node& self) {
                       ConstMatrixMap dy(self.grad.data(), rows, out_features);
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       if (px.requires_grad) {
                         MatrixMap(px.grad_buffer(), rows, in).noalias() +=
                             dy * ConstMatrixMap(pw.value.data(), out_features, in);
                       }
                       if (pw.requires_grad) {
                         MatrixMap(pw.grad_buffer(), out_features, in).noalias() +=
                             dy.transpose() * ConstMatrixMap(px.value.data(), rows, in);
                       }
                       if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                         VectorMap(self.parents[2]->grad_buffer(), out_features) +=
                             dy.colwise().sum().transpose();
                       }
                     });
}

Var batched_matmul(const Var& a, const Var& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    fail(ErrorCode::shape_mismatch, "batched_matmul: {} and {}", to_string(a.shape()),
         to_string(b.shape()));
  }
  const Index groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    fail(ErrorCode::shape_mismatch, "batched_matmul: inner dims of {} and {} differ",
         to_string(a.shape()), to_string(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(groups * m * n));
  for (Index g = 0; g < groups; ++g) {
    ConstMatrixMap ag(a.values().data() + g * m * k, m, k);
    MatrixMap cg(out.data() + g * m * n, m, n);
    if (transpose_b) {
      cg.noalias() = ag * ConstMatrixMap(b.values().data() + g * n * k, n, k).transpose();
    } else {
      cg.noalias() = ag * ConstMatrixMap(b.values().data() + g * k * n, k, n);
    }
  }
  return make_result({groups, m, n}, std::move(out), {a, b},
                     [groups, m, k, n, transpose_b](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       double* ga = pa.requires_grad ? pa.grad_buffer() : nullptr;
                       double* gb = pb.requires_grad ? pb.grad_buffer() : nullptr;
                       for (Index g = 0; g < groups; ++g) {
                         ConstMatrixMap dc(self.grad.data() + g * m * n, m, n);
                         ConstMatrixMap av(pa.value.data() + g * m * k, m, k);
                         if (transpose_b) {
                           ConstMatrixMap bv(pb.value.data() + g * n * k, n, k);
                           if (ga) MatrixMap(ga + g * m * k, m, k).noalias() += dc * bv;
                           if (gb) MatrixMap(gb + g * n * k, n, k).noalias() += dc.transpose() * av;
                         } else {
                           ConstMatrixMap bv(pb.value.data() + g * k * n, k, n);
                           if (ga) MatrixMap(ga + g * m * k, m, k).noalias() += dc * bv.transpose();
                           if (gb) MatrixMap(gb + g * k * n, k, n).noalias() += av.transpose() * dc;
                         }
                       }
                     });
}

Var softmax_last(const Var& x) {
  const Index width = x.shape().back();
  const Index rows = x.numel() / width;
  std::vector<double> out(x.values().begin(), x.values().end());
  for (Index r = 0; r < rows; ++r) {
    double* row = out.data() + r * width;
    const double peak = *std::max_element(row, row + width);
    double total = 0.0;
    for (Index i = 0; i < width; ++i) total += (row[i] = std::exp(row[i] - peak));
    for (Index i = 0; i < width; ++i) row[i] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, width](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (Index r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * width;
      const double* dy = self.grad.data() + r * width;
      double inner = 0.0;
      for (Index i = 0; i < width; ++i) inner += dy[i] * y[i];
      for (Index i = 0; i < width; ++i) g[r * width + i] += y[i] * (dy[i] - inner);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index width = x.shape().back();
  if (gamma.numel() != width || beta.numel() != width) {
    fail(ErrorCode::shape_mismatch, "layer_norm: width {} vs affine {} / {}", width,
         gamma.numel(), beta.numel());
  }
  const Index rows = x.numel() / width;
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> out(xv.size());
  auto normalized = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (Index i = 0; i < width; ++i) mu += row[i];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (Index i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (Index i = 0; i < width; ++i) {
      const double h = (row[i] - mu) * inv;
      (*normalized)[r * width + i] = h;
      out[r * width + i] = h * gv[i] + bv[i];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, width, normalized, rstd](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       double* gx = px.requires_grad ? px.grad_buffer() : nullptr;
                       double* gg = pg.requires_grad ? pg.grad_buffer() : nullptr;
                       double* gb = pb.requires_grad ? pb.grad_buffer() : nullptr;
                       const double n = static_cast<double>(width);
                       for (Index r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * width;
                         const double* h = normalized->data() + r * width;
                         double sum_g = 0.0, sum_gh = 0.0;
                         for (Index i = 0; i < width; ++i) {
                           const double gi = dy[i] * pg.value[i];
                           sum_g += gi;
                           sum_gh += gi * h[i];
                           if (gg) gg[i] += dy[i] * h[i];
                           if (gb) gb[i] += dy[i];
                         }
                         if (gx) {
                           const double inv = (*rstd)[r];
                           for (Index i = 0; i < width; ++i) {
                             const double gi = dy[i] * pg.value[i];
                             gx[r * width + i] += inv / n * (n * gi - sum_g - h[i] * sum_gh);
                           }
                         }
                       }
                     });
}

Var max_pool_last(const Var& x, Index k) {
  const Index width = x.rank() ? x.shape().back() : 0;
  if (k <= 0 || width % k != 0) {
    fail(ErrorCode::invalid_argument, "max pooling window {} does not divide length {}", k,
         width);
  }
  const Index rows = x.numel() / width;
  const Index out_width = width / k;
  Shape out_shape = x.shape();
  out_shape.back() = out_width;
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(rows * out_width));
  auto argmax = std::make_shared<std::vector<Index>>(out.size());
  for (Index r = 0; r < rows; ++r) {
    for (Index o = 0; o < out_width; ++o) {
      Index best = r * width + o * k;
      for (Index j = 1; j < k; ++j) {
        const Index cand = r * width + o * k + j;
        if (xv[cand] > xv[best]) best = cand;
      }
      out[r * out_width + o] = xv[best];
      (*argmax)[r * out_width + o] = best;
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [argmax](Node& self) {
    double* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

}  // namespace msiqa::ops
