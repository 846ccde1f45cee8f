// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "msiqa/errors.hpp"
#include "msiqa/fusion.hpp"
#include "msiqa/ops.hpp"
#include "support.hpp"

using namespace msiqa;
using namespace msiqa::fusion;
using testing::oracle::sigmoid;

namespace {

Var identity(Index d) {
  std::vector<double> v(static_cast<std::size_t>(d * d), 0.0);
  for (Index i = 0; i < d; ++i) v[static_cast<std::size_t>(i * d + i)] = 1.0;
  return Var::constant({d, d}, v);
}

AgcaParams identity_block(Index d, std::vector<double> adjacency = {}) {
  if (adjacency.empty()) adjacency.assign(static_cast<std::size_t>(d * d), 0.0);
  return {identity(d), Var::zeros({d}), Var::constant({d, d}, std::move(adjacency))};
}

AgcaParams random_block(std::mt19937_64& rng, Index d, bool zero_adjacency = false) {
  return {testing::random_leaf(rng, {d, d}), testing::random_leaf(rng, {d}),
          zero_adjacency ? Var::leaf({d, d}, std::vector<double>(static_cast<std::size_t>(d * d), 0.0), true)
                         : testing::random_leaf(rng, {d, d})};
}

backbones::StageFeatures random_stages(std::mt19937_64& rng, Index batch, backbones::StageChannels channels,
                                       Index size) {
  backbones::StageFeatures out;
  for (int i = 0; i < 4; ++i) {
    const Index s = size >> i;
    out.stages[i] = testing::random_leaf(rng, {batch, channels[i], s, s});
  }
  return out;
}

}  // namespace

TEST_CASE("stage concatenation") {
  const Var a = concat_stage(Var::zeros({1, 256, 56, 56}), Var::zeros({1, 96, 56, 56}));
  CHECK(a.shape() == Shape{1, 352, 56, 56});

  const Var b = concat_stage(Var::full({1, 2, 4, 4}, 1.0), Var::full({1, 3, 4, 4}, 2.0));
  REQUIRE(b.shape() == Shape{1, 5, 4, 4});
  for (Index c = 0; c < 5; ++c) {
    for (Index k = 0; k < 16; ++k) CHECK(b.values()[c * 16 + k] == (c < 2 ? 1.0 : 2.0));
  }
  CHECK_THROWS_AS(concat_stage(Var::zeros({1, 2, 4, 4}), Var::zeros({1, 2, 8, 8})), Error);
}

TEST_CASE("channel descriptor") {
  SUBCASE("constant channels under the identity reduction") {
    const Var stage = Var::constant({1, 3, 2, 2}, {5, 5, 5, 5, -1, -1, -1, -1, 0.25, 0.25, 0.25, 0.25});
    const Var d = channel_descriptor(stage, {identity(3), {}});
    CHECK(std::vector<double>(d.values().begin(), d.values().end()) == std::vector<double>{5, -1, 0.25});
  }
  SUBCASE("spatial mean") {
    const Var stage = Var::constant({1, 2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 0});
    const Var d = channel_descriptor(stage, {identity(2), {}});
    CHECK(d.values()[0] == 2.5);
    CHECK(d.values()[1] == 0.0);
  }
  SUBCASE("zero reduction") {
    std::mt19937_64 rng(1);
    const Var stage = testing::random_leaf(rng, {2, 4, 3, 3});
    const Var d = channel_descriptor(stage, {Var::zeros({3, 4}), {}});
    CHECK(d.shape() == Shape{2, 3});
    for (double v : d.values()) CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(channel_descriptor(Var::zeros({1, 3, 2, 2}), {identity(2), {}}), Error);
}

TEST_CASE("attention matrix") {
  SUBCASE("zero descriptor with identity transform") {
    const Var a = agca_attention_matrix(Var::zeros({4}), identity_block(4));
    for (Index i = 0; i < 4; ++i) {
      for (Index j = 0; j < 4; ++j) CHECK(a.values()[i * 4 + j] == (i == j ? 0.5 : 0.0));
    }
  }
  SUBCASE("zero adjacency gives a diagonal in (0, 1)") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      const auto block = random_block(rng, 5, true);
      const Var a = agca_attention_matrix(testing::random_leaf(rng, {5}, -4.0, 4.0), block);
      for (Index i = 0; i < 5; ++i) {
        for (Index j = 0; j < 5; ++j) {
          const double v = a.values()[i * 5 + j];
          if (i == j) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
          } else {
            CHECK(v == 0.0);
          }
        }
      }
    }
  }
  SUBCASE("hand-computed two-channel case") {
    const Var a = agca_attention_matrix(Var::zeros({2}), identity_block(2, {0, 1, 1, 0}));
    CHECK(std::vector<double>(a.values().begin(), a.values().end()) == std::vector<double>{0.5, 1, 1, 0.5});
  }
  SUBCASE("batched form stacks per-row matrices") {
    std::mt19937_64 rng(3);
    const auto block = random_block(rng, 3);
    const Var f_in = testing::random_leaf(rng, {2, 3});
    const Var batched = agca_attention_matrix(f_in, block);
    REQUIRE(batched.shape() == Shape{2, 3, 3});
    for (Index b = 0; b < 2; ++b) {
      const Var row = Var::constant({3}, {f_in.values()[b * 3], f_in.values()[b * 3 + 1], f_in.values()[b * 3 + 2]});
      const Var single = agca_attention_matrix(row, block);
      for (Index k = 0; k < 9; ++k) CHECK(batched.values()[b * 9 + k] == single.values()[k]);
    }
  }
}

TEST_CASE("attention application") {
  SUBCASE("zero input") {
    std::mt19937_64 rng(4);
    const Var out = agca_apply(Var::zeros({2, 6}), random_block(rng, 6));
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("single channel") {
    const Var out = agca_apply(Var::constant({1, 1}, {1.0}), identity_block(1));
    CHECK(out.values()[0] == doctest::Approx(sigmoid(1.0)).epsilon(1e-15));
    CHECK(out.values()[0] == doctest::Approx(0.7311).epsilon(1e-4));
  }
  SUBCASE("two channels agree with the explicit matrix product") {
    const auto block = identity_block(2, {0, 1, 1, 0});
    const Var f_in = Var::constant({1, 2}, {1.0, 2.0});
    const Var out = agca_apply(f_in, block);
    const double f0 = sigmoid(1.0), f1 = sigmoid(2.0);
    CHECK(out.values()[0] == doctest::Approx(f0 * 1.0 + 1.0 * 2.0).epsilon(1e-15));
    CHECK(out.values()[1] == doctest::Approx(1.0 * 1.0 + f1 * 2.0).epsilon(1e-15));
    const Var a = agca_attention_matrix(Var::constant({2}, {1.0, 2.0}), block);
    for (Index i = 0; i < 2; ++i) {
      CHECK(out.values()[i] == doctest::Approx(a.values()[i * 2] * 1.0 + a.values()[i * 2 + 1] * 2.0).epsilon(1e-15));
    }
  }
  SUBCASE("random blocks agree with A · f_in") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const auto block = random_block(rng, 4);
      const Var f_in = testing::random_leaf(rng, {1, 4});
      const Var a = agca_attention_matrix(Var::constant({4}, {f_in.values().begin(), f_in.values().end()}), block);
      const Var out = agca_apply(f_in, block);
      for (Index i = 0; i < 4; ++i) {
        double s = 0;
        for (Index j = 0; j < 4; ++j) s += a.values()[i * 4 + j] * f_in.values()[j];
        CHECK(std::abs(out.values()[i] - s) < 1e-12);
      }
    }
  }
}

TEST_CASE("fused widths") {
  FusionInputs full{backbones::StageChannels{256, 512, 1024, 2048}, backbones::StageChannels{96, 192, 384, 768}};
  FusionConfig cfg;
  CHECK(full.fused_channels() == backbones::StageChannels{352, 704, 1408, 2816});
  const auto widths = fused_widths(full, cfg);
  CHECK(widths.f_w == 512);
  CHECK(widths.f_s == 384);

  cfg.pool_kernel = 3;
  CHECK_THROWS_AS(validate(full, cfg), Error);
  cfg.pool_kernel = 0;
  CHECK_THROWS_AS(validate(full, cfg), Error);

  FusionInputs toy{backbones::StageChannels{8, 16, 32, 64}, backbones::StageChannels{4, 8, 16, 32}};
  FusionConfig small{8, 2, 4, true};
  CHECK(fused_widths(toy, small).f_w == 16);
  CHECK(fused_widths(toy, small).f_s == 16);
  small.stage_count = 2;
  CHECK(fused_widths(toy, small).f_w == 8);
}

TEST_CASE("fuse produces the stated vectors") {
  std::mt19937_64 rng(6);
  const backbones::StageChannels rc{6, 8, 10, 12}, wc{2, 4, 6, 8};
  FusionInputs inputs{rc, wc};
  FusionConfig cfg{4, 2, 4, true};
  const auto params = init_fusion_params(inputs, cfg, 7);
  const auto view = fusion_view(params, cfg);

  SUBCASE("shapes") {
    const auto res = random_stages(rng, 3, rc, 8), win = random_stages(rng, 3, wc, 8);
    const auto out = fuse(res, win, cfg, view);
    CHECK(out.fused_stages[0].shape() == Shape{3, 8, 8, 8});
    CHECK(out.fused_stages[3].shape() == Shape{3, 20, 1, 1});
    CHECK(out.feature_w.shape() == Shape{3, 16});
    CHECK(out.feature_s.shape() == Shape{3, 8});
    CHECK(out.f_w.shape() == Shape{3, 8});
    CHECK(out.f_s.shape() == Shape{3, 4});
  }
  SUBCASE("all-zero features give zero vectors") {
    backbones::StageFeatures res, win;
    for (int i = 0; i < 4; ++i) {
      res.stages[i] = Var::zeros({1, rc[i], 8 >> i, 8 >> i});
      win.stages[i] = Var::zeros({1, wc[i], 8 >> i, 8 >> i});
    }
    const auto out = fuse(res, win, cfg, view);
    for (double v : out.f_w.values()) CHECK(v == 0.0);
    for (double v : out.f_s.values()) CHECK(v == 0.0);
  }
  SUBCASE("batch rows are independent") {
    const auto res = random_stages(rng, 2, rc, 8), win = random_stages(rng, 2, wc, 8);
    const auto both = fuse(res, win, cfg, view);
    backbones::StageFeatures res0, win0;
    for (int i = 0; i < 4; ++i) {
      const Index r = rc[i] * (64 >> (2 * i)), w = wc[i] * (64 >> (2 * i));
      const auto rv = res.stages[i].values(), wv = win.stages[i].values();
      res0.stages[i] = Var::constant({1, rc[i], 8 >> i, 8 >> i}, {rv.begin(), rv.begin() + r});
      win0.stages[i] = Var::constant({1, wc[i], 8 >> i, 8 >> i}, {wv.begin(), wv.begin() + w});
    }
    const auto one = fuse(res0, win0, cfg, view);
    for (Index k = 0; k < 8; ++k) CHECK(std::abs(one.f_w.values()[k] - both.f_w.values()[k]) < 1e-14);
    for (Index k = 0; k < 4; ++k) CHECK(std::abs(one.f_s.values()[k] - both.f_s.values()[k]) < 1e-14);
  }
  SUBCASE("single-backbone and attention-free variants") {
    const auto res = random_stages(rng, 1, rc, 8), win = random_stages(rng, 1, wc, 8);
    FusionInputs residual_only{rc, std::nullopt};
    const auto p1 = init_fusion_params(residual_only, cfg, 1);
    const auto out1 = fuse(&res, nullptr, cfg, fusion_view(p1, cfg));
    CHECK(out1.f_w.shape() == Shape{1, 8});
    CHECK(out1.f_s.shape() == Shape{1, 6});

    FusionConfig plain{4, 2, 4, false};
    CHECK(init_fusion_params(inputs, plain, 1).size() == 0);
    const auto out2 = fuse(res, win, plain, {});
    CHECK(out2.f_w.shape() == Shape{1, 10});
    CHECK(out2.f_s.shape() == Shape{1, 4});
  }
}

TEST_CASE("fusion gradients match finite differences") {
  std::mt19937_64 rng(8);
  const backbones::StageChannels rc{2, 3, 3, 4}, wc{1, 2, 3, 2};
  FusionConfig cfg{3, 2, 4, true};
  const auto params = init_fusion_params({rc, wc}, cfg, 9);
  for (const auto& p : params.entries()) {
    if (p.name.ends_with("adjacency")) {
      Var v = p.var;
      auto values = testing::random_values(rng, v.numel(), -0.5, 0.5);
      std::copy(values.begin(), values.end(), v.mutable_values().begin());
    }
  }
  const auto view = fusion_view(params, cfg);
  const auto res = random_stages(rng, 2, rc, 8), win = random_stages(rng, 2, wc, 8);
  const auto w_weights = testing::random_values(rng, 2 * 6), s_weights = testing::random_values(rng, 2 * 1);
  auto objective = [&] {
    const auto out = fuse(res, win, cfg, view);
    return ops::add(ops::dot_constant(out.f_w, w_weights), ops::dot_constant(out.f_s, s_weights));
  };
  std::vector<Var> inputs = params.trainable_vars();
  for (int i = 0; i < 4; ++i) {
    inputs.push_back(res.stages[i]);
    inputs.push_back(win.stages[i]);
  }
  CHECK(testing::check_gradients(objective, inputs).relative_error < 1e-6);
}
