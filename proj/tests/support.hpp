// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries: random tensors, a central-difference
// gradient checker, independent metric/loss oracles and scratch directories.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "msiqa/autograd.hpp"
#include "msiqa/image.hpp"

namespace testing {

using msiqa::Index;
using msiqa::Shape;
using msiqa::Var;

inline std::vector<double> random_values(std::mt19937_64& rng, Index n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = dist(rng);
  return out;
}

inline Var random_leaf(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const Index n = msiqa::numel(shape);
  return Var::leaf(std::move(shape), random_values(rng, n, lo, hi), true);
}

// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor), over every
// element of every input.
struct GradCheck {
  double relative_error = 0;
  Index elements = 0;
};

inline GradCheck check_gradients(const std::function<Var()>& f, const std::vector<Var>& inputs,
                                 double step = 1e-6, double floor = 1e-10) {
  for (Var v : inputs) v.zero_grad();
  f().backward();
  std::vector<double> analytic, numeric;
  for (const auto& input : inputs) {
    Var v = input;
    const auto g = v.grad();
    for (Index i = 0; i < v.numel(); ++i) analytic.push_back(g.empty() ? 0.0 : g[static_cast<std::size_t>(i)]);
    auto values = v.mutable_values();
    for (Index i = 0; i < v.numel(); ++i) {
      const double saved = values[static_cast<std::size_t>(i)];
      double up = 0, down = 0;
      {
        msiqa::NoGradGuard guard;
        values[static_cast<std::size_t>(i)] = saved + step;
        up = f().item();
        values[static_cast<std::size_t>(i)] = saved - step;
        down = f().item();
      }
      values[static_cast<std::size_t>(i)] = saved;
      numeric.push_back((up - down) / (2 * step));
    }
  }
  double diff = 0, norm_a = 0, norm_n = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    norm_a += analytic[i] * analytic[i];
    norm_n += numeric[i] * numeric[i];
  }
  const double scale = std::max({std::sqrt(norm_a), std::sqrt(norm_n), floor});
  return {std::sqrt(diff) / scale, static_cast<Index>(analytic.size())};
}

namespace oracle {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double mse(const std::vector<double>& y, const std::vector<double>& t) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - t[i]) * (y[i] - t[i]);
  return s / static_cast<double>(y.size());
}

// Every ordered pair i != j, halved.
inline double ranking(const std::vector<double>& y, const std::vector<double>& t, double alpha) {
  const std::size_t n = y.size();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = sigmoid(alpha * (t[i] - t[j])) - sigmoid(alpha * (y[i] - y[j]));
      s += d * d;
    }
  }
  return s / static_cast<double>(n * (n - 1));
}

// cov(x, y) / (sd(x) sd(y)) with sample moments.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  const double cov = sxy / (n - 1), vx = sxx / (n - 1), vy = syy / (n - 1);
  return cov / std::sqrt(vx * vy);
}

// Sort, then walk runs of equal values and hand each the mean of its positions.
inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::pair<double, std::size_t>> sorted;
  for (std::size_t i = 0; i < x.size(); ++i) sorted.emplace_back(x[i], i);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out(x.size());
  std::size_t start = 0;
  while (start < sorted.size()) {
    std::size_t end = start;
    while (end + 1 < sorted.size() && sorted[end + 1].first == sorted[start].first) ++end;
    double mean_rank = 0;
    for (std::size_t k = start; k <= end; ++k) mean_rank += static_cast<double>(k + 1);
    mean_rank /= static_cast<double>(end - start + 1);
    for (std::size_t k = start; k <= end; ++k) out[sorted[k].second] = mean_rank;
    start = end + 1;
  }
  return out;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

}  // namespace oracle

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("msiqa_test_" + name + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

// Smooth grey phantom with a few bright discs, so noise and compression
// both have structure to damage.
inline msiqa::imaging::Image phantom(Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto image = msiqa::imaging::Image::blank(1, size, size);
  struct Disc {
    double x, y, r, v;
  };
  std::vector<Disc> discs;
  for (int i = 0; i < 5; ++i) discs.push_back({u(rng) * size, u(rng) * size, (0.08 + 0.2 * u(rng)) * size, u(rng)});
  const double gx = u(rng), gy = u(rng);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      double v = 0.2 + 0.3 * (gx * x + gy * y) / static_cast<double>(2 * size);
      for (const auto& d : discs) {
        const double dx = x - d.x, dy = y - d.y;
        if (dx * dx + dy * dy < d.r * d.r) v = 0.5 * v + 0.5 * d.v;
      }
      image.at(0, y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return image;
}

// Writes {patient}_{slice}.png phantoms: patients P0..P{n-1}, `slices` each.
inline void write_pristine_set(const std::filesystem::path& dir, int patients, int slices, Index size,
                               std::uint64_t seed = 1) {
  std::filesystem::create_directories(dir);
  for (int p = 0; p < patients; ++p) {
    for (int s = 0; s < slices; ++s) {
      const auto name = "P" + std::to_string(p) + "_S" + std::to_string(s) + ".png";
      msiqa::imaging::write_png(dir / name, phantom(size, seed * 1000 + static_cast<std::uint64_t>(p * 100 + s)));
    }
  }
}

}  // namespace testing
