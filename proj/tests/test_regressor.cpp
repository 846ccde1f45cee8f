// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"
#include "msiqa/regressor.hpp"
#include "support.hpp"

using namespace msiqa;
using namespace msiqa::regressor;

namespace {

fusion::LinearParams layer(Shape shape, std::vector<double> weight, double bias = 0.0) {
  const Index out = shape[0];
  return {Var::constant(std::move(shape), std::move(weight)),
          Var::constant({out}, std::vector<double>(static_cast<std::size_t>(out), bias))};
}

fusion::LinearParams zero_layer(Index out, Index in) {
  return layer({out, in}, std::vector<double>(static_cast<std::size_t>(out * in), 0.0));
}

RegressorParams random_params(std::mt19937_64& rng, Index w_in, Index s_in, Index hidden) {
  auto random_layer = [&](Index out, Index in) {
    return fusion::LinearParams{testing::random_leaf(rng, {out, in}), testing::random_leaf(rng, {out})};
  };
  return {random_layer(hidden, s_in), random_layer(1, hidden), random_layer(hidden, w_in), random_layer(1, hidden)};
}

}  // namespace

TEST_CASE("score branch") {
  RegressorParams p{zero_layer(3, 4), zero_layer(1, 3), {}, {}};
  const Var s = score_branch(Var::zeros({2, 4}), p, 0.01);
  CHECK(s.shape() == Shape{2, 1});
  for (double v : s.values()) CHECK(v == 0.0);

  RegressorParams tiny{layer({1, 1}, {1.0}), layer({1, 1}, {1.0}), {}, {}};
  CHECK(score_branch(Var::constant({1, 1}, {-1.0}), tiny, 0.01).item() == doctest::Approx(-0.0001).epsilon(1e-12));
}

TEST_CASE("weight branch") {
  RegressorParams p{{}, {}, zero_layer(3, 4), zero_layer(1, 3)};
  CHECK(weight_branch(Var::zeros({1, 4}), p, 0.01).item() == 0.5);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = random_params(rng, 5, 3, 4);
    const Var w = weight_branch(testing::random_leaf(rng, {3, 5}, -5.0, 5.0), r, 0.01);
    for (double v : w.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }

  // Positive hidden activation; growing the output weight drives W up to 1.
  double previous = 0.5;
  for (double scale : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0}) {
    RegressorParams grow{{}, {}, layer({1, 1}, {1.0}), layer({1, 1}, {scale})};
    const double w = weight_branch(Var::constant({1, 1}, {1.0}), grow, 0.01).item();
    CHECK(w > previous);
    previous = w;
  }
  CHECK(previous > 1.0 - 1e-12);
}

TEST_CASE("score is the product of the branches") {
  RegressorConfig cfg{1, 0.01, true};
  SUBCASE("zero score branch") {
    std::mt19937_64 rng(2);
    auto r = random_params(rng, 3, 2, 1);
    r.score1 = zero_layer(1, 2);
    r.score2 = zero_layer(1, 1);
    CHECK(predict(testing::random_leaf(rng, {1, 3}), testing::random_leaf(rng, {1, 2}), r, cfg).score.item() == 0.0);
  }
  SUBCASE("zero parameters") {
    RegressorParams r{zero_layer(1, 2), zero_layer(1, 1), zero_layer(1, 3), zero_layer(1, 1)};
    const auto out = predict(Var::full({1, 3}, 1.0), Var::full({1, 2}, 1.0), r, cfg);
    CHECK(out.s.item() == 0.0);
    CHECK(out.w.item() == 0.5);
    CHECK(out.score.item() == 0.0);
  }
  SUBCASE("S = 2 and W = 0.5") {
    RegressorParams r{layer({1, 1}, {2.0}), layer({1, 1}, {1.0}), zero_layer(1, 1), zero_layer(1, 1)};
    const auto out = predict(Var::constant({1, 1}, {3.0}), Var::constant({1, 1}, {1.0}), r, cfg);
    CHECK(out.s.item() == 2.0);
    CHECK(out.w.item() == 0.5);
    CHECK(out.score.item() == 1.0);
  }
  SUBCASE("without the weight branch the score is S") {
    RegressorConfig no_weight{4, 0.01, false};
    std::mt19937_64 rng(3);
    const auto r = random_params(rng, 3, 2, 4);
    const Var f_s = testing::random_leaf(rng, {5, 2});
    const auto out = predict(testing::random_leaf(rng, {5, 3}), f_s, r, no_weight);
    CHECK_FALSE(out.w.defined());
    const Var s = score_branch(f_s, r, 0.01);
    CHECK(std::equal(out.score.values().begin(), out.score.values().end(), s.values().begin()));
    CHECK(init_regressor_params(6, 4, no_weight, 1).size() == 4);
    CHECK(init_regressor_params(6, 4, cfg, 1).size() == 8);
  }
}

TEST_CASE("regressor gradients match finite differences") {
  std::mt19937_64 rng(4);
  const auto r = random_params(rng, 6, 4, 5);
  const Var f_w = testing::random_leaf(rng, {3, 6}), f_s = testing::random_leaf(rng, {3, 4});
  const auto weights = testing::random_values(rng, 3);
  RegressorConfig cfg{5, 0.01, true};
  auto objective = [&] { return ops::dot_constant(predict(f_w, f_s, r, cfg).score, weights); };
  CHECK(testing::check_gradients(objective, {f_w, f_s, r.score1.weight, r.score1.bias, r.score2.weight,
                                             r.score2.bias, r.weight1.weight, r.weight1.bias, r.weight2.weight,
                                             r.weight2.bias})
            .relative_error < 1e-6);
}

TEST_CASE("width mismatches are rejected") {
  std::mt19937_64 rng(5);
  const auto r = random_params(rng, 6, 4, 5);
  CHECK_THROWS_AS(score_branch(Var::zeros({1, 3}), r, 0.01), Error);
  CHECK_THROWS_AS(weight_branch(Var::zeros({1, 4}), r, 0.01), Error);
  RegressorConfig bad{0, 0.01, true};
  CHECK_THROWS_AS(init_regressor_params(4, 4, bad, 1), Error);
}
