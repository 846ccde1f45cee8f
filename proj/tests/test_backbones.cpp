// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "msiqa/backbones.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/ops.hpp"
#include "msiqa/safetensors.hpp"
#include "support.hpp"

using namespace msiqa;
using namespace msiqa::backbones;

namespace {

Var random_images(std::mt19937_64& rng, Index n, Index size) {
  return Var::constant({n, 3, size, size}, testing::random_values(rng, n * 3 * size * size, 0.0, 1.0));
}

Shape stage_shape(Index c, Index s) { return {1, c, s, s}; }

// Relative L2 distance of our stage outputs to the recorded ones.
void compare_with_reference(const std::filesystem::path& path, double tolerance) {
  const TensorFile file = read_tensor_file(path);
  const auto spec = BackboneSpec::defaults(parse_backbone_kind(file.metadata.at("backbone_kind")));
  const auto loaded = load_backbone_weights(spec, path);
  CHECK(loaded.report.missing.empty());
  const TensorRecord* input = file.find("reference.input");
  REQUIRE(input != nullptr);
  const auto stages = extract_stages(Var::constant(input->shape, input->values), spec, loaded.params);
  for (int i = 0; i < 4; ++i) {
    const TensorRecord* expected = file.find("reference.stage" + std::to_string(i + 1));
    REQUIRE(expected != nullptr);
    REQUIRE(stages.stages[i].shape() == expected->shape);
    const auto got = stages.stages[i].values();
    double diff = 0, norm = 0;
    for (std::size_t k = 0; k < got.size(); ++k) {
      diff += (got[k] - expected->values[k]) * (got[k] - expected->values[k]);
      norm += expected->values[k] * expected->values[k];
    }
    INFO(path.filename().string(), " stage ", i + 1);
    CHECK(std::sqrt(diff / norm) < tolerance);
  }
}

}  // namespace

TEST_CASE("full-size stage shapes at 224") {
  std::mt19937_64 rng(1);
  const Var images = random_images(rng, 1, 224);
  SUBCASE("residual50") {
    const auto spec = BackboneSpec::defaults(BackboneKind::residual50);
    const auto out = extract_stages(images, spec, init_backbone_params(spec, 1));
    CHECK(out.stages[0].shape() == stage_shape(256, 56));
    CHECK(out.stages[1].shape() == stage_shape(512, 28));
    CHECK(out.stages[2].shape() == stage_shape(1024, 14));
    CHECK(out.stages[3].shape() == stage_shape(2048, 7));
  }
  SUBCASE("windowed_tiny") {
    const auto spec = BackboneSpec::defaults(BackboneKind::windowed_tiny);
    const auto out = extract_stages(images, spec, init_backbone_params(spec, 1));
    CHECK(out.stages[0].shape() == stage_shape(96, 56));
    CHECK(out.stages[1].shape() == stage_shape(192, 28));
    CHECK(out.stages[2].shape() == stage_shape(384, 14));
    CHECK(out.stages[3].shape() == stage_shape(768, 7));
  }
}

TEST_CASE("toy stage shapes follow the stage channels") {
  std::mt19937_64 rng(2);
  const Var images = random_images(rng, 2, 64);
  for (auto kind : {BackboneKind::toy_residual, BackboneKind::toy_windowed}) {
    auto spec = BackboneSpec::defaults(kind);
    const auto out = extract_stages(images, spec, init_backbone_params(spec, 3));
    for (int i = 0; i < 4; ++i) {
      CHECK(out.stages[i].shape() == Shape{2, spec.stage_channels[i], 16 >> i, 16 >> i});
    }
  }
  auto wide = BackboneSpec::defaults(BackboneKind::toy_residual);
  wide.stage_channels = {4, 6, 10, 12};
  const auto out = extract_stages(images, wide, init_backbone_params(wide, 3));
  CHECK(out.stages[3].shape() == Shape{2, 12, 2, 2});
}

TEST_CASE("toy backbones match the torch reference fixtures") {
  compare_with_reference(std::filesystem::path(MSIQA_TEST_DATA) / "toy_residual_reference.safetensors", 1e-12);
  compare_with_reference(std::filesystem::path(MSIQA_TEST_DATA) / "toy_windowed_reference.safetensors", 1e-12);
}

TEST_CASE("full-size backbones match torchvision when reference files are present") {
  const char* dir = std::getenv("MSIQA_REFERENCE_DIR");
  if (dir == nullptr) {
    MESSAGE("MSIQA_REFERENCE_DIR not set; run tools/torch_reference.py --full to enable");
    return;
  }
  compare_with_reference(std::filesystem::path(dir) / "residual50_reference.safetensors", 1e-12);
  compare_with_reference(std::filesystem::path(dir) / "windowed_tiny_reference.safetensors", 1e-12);
}

TEST_CASE("token grid conversion") {
  const Var tokens = Var::constant({1, 4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  const Var maps = token_grid_to_channel_first(tokens);
  REQUIRE(maps.shape() == Shape{1, 2, 2, 2});
  for (Index h = 0; h < 2; ++h) {
    for (Index w = 0; w < 2; ++w) {
      for (Index c = 0; c < 2; ++c) {
        CHECK(maps.values()[(c * 2 + h) * 2 + w] == tokens.values()[(h * 2 + w) * 2 + c]);
      }
    }
  }
  std::mt19937_64 rng(4);
  const Var random = Var::constant({3, 9, 5}, testing::random_values(rng, 135));
  const Var back = channel_first_to_token_grid(token_grid_to_channel_first(random));
  CHECK(std::equal(back.values().begin(), back.values().end(), random.values().begin()));
  CHECK_THROWS_AS(token_grid_to_channel_first(Var::zeros({1, 5, 2})), Error);
}

TEST_CASE("backbone checkpoints") {
  testing::ScratchDir dir("backbone_ckpt");
  SUBCASE("round trip keeps every tensor") {
    const auto spec = BackboneSpec::defaults(BackboneKind::toy_windowed);
    const auto params = init_backbone_params(spec, 9);
    save_backbone_weights(spec, params, dir / "w.safetensors");
    const auto loaded = load_backbone_weights(spec, dir / "w.safetensors");
    CHECK(loaded.report.missing.empty());
    CHECK(loaded.report.extra.empty());
    REQUIRE(loaded.params.size() == params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& a = params.entries()[i];
      const auto& b = loaded.params.at(a.name);
      CHECK(std::equal(a.var.values().begin(), a.var.values().end(), b.values().begin(), b.values().end()));
    }
  }
  SUBCASE("residual weights cannot load into the windowed family") {
    const auto residual = BackboneSpec::defaults(BackboneKind::residual50);
    save_backbone_weights(residual, init_backbone_params(residual, 1), dir / "r50.safetensors");
    try {
      load_backbone_weights(BackboneSpec::defaults(BackboneKind::windowed_tiny), dir / "r50.safetensors");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::shape_mismatch);
    }
  }
  SUBCASE("an unused tensor is reported as extra") {
    const auto spec = BackboneSpec::defaults(BackboneKind::toy_residual);
    TensorFile file = to_tensor_file(init_backbone_params(spec, 2));
    file.tensors.push_back({"head.fc.weight", {2, 2}, {1, 2, 3, 4}});
    write_tensor_file(dir / "extra.safetensors", file);
    const auto loaded = load_backbone_weights(spec, dir / "extra.safetensors");
    CHECK(loaded.report.extra == std::vector<std::string>{"head.fc.weight"});
    CHECK(loaded.report.missing.empty());
  }
  SUBCASE("a tensor of the wrong shape is rejected") {
    const auto spec = BackboneSpec::defaults(BackboneKind::toy_residual);
    TensorFile file = to_tensor_file(init_backbone_params(spec, 2));
    file.tensors.front().shape = {1};
    file.tensors.front().values = {0.0};
    write_tensor_file(dir / "bad.safetensors", file);
    CHECK_THROWS_AS(load_backbone_weights(spec, dir / "bad.safetensors"), Error);
  }
}

TEST_CASE("input validation") {
  const auto spec = BackboneSpec::defaults(BackboneKind::toy_residual);
  const auto params = init_backbone_params(spec, 1);
  CHECK_THROWS_AS(extract_stages(Var::zeros({1, 3, 48, 48}), spec, params), Error);
  CHECK_THROWS_AS(extract_stages(Var::zeros({1, 1, 64, 64}), spec, params), Error);
  CHECK_THROWS_AS(extract_stages(Var::full({1, 3, 64, 64}, 1.5), spec, params), Error);
  CHECK_THROWS_AS(extract_stages(Var::full({1, 3, 64, 64}, std::nan("")), spec, params), Error);
  auto odd = spec;
  odd.stage_channels = {8, 16, 32, 0};
  CHECK_THROWS_AS(validate(odd), Error);
}

TEST_CASE("zero image with a zeroed final-stage affine stays finite") {
  for (auto kind : {BackboneKind::toy_residual, BackboneKind::toy_windowed}) {
    const auto spec = BackboneSpec::defaults(kind);
    auto params = init_backbone_params(spec, 5);
    for (const auto& p : params.entries()) {
      const bool last_stage = p.name.rfind("layer4.", 0) == 0 || p.name.rfind("layers.3.", 0) == 0;
      if (last_stage && p.trainable) {
        Var v = p.var;
        std::fill(v.mutable_values().begin(), v.mutable_values().end(), 0.0);
      }
    }
    const auto out = extract_stages(Var::zeros({1, 3, 64, 64}), spec, params);
    for (const auto& stage : out.stages) {
      for (double v : stage.values()) REQUIRE(std::isfinite(v));
    }
  }
}

TEST_CASE("forward passes are deterministic") {
  std::mt19937_64 rng(6);
  const Var images = random_images(rng, 2, 64);
  for (auto kind : {BackboneKind::toy_residual, BackboneKind::toy_windowed}) {
    const auto spec = BackboneSpec::defaults(kind);
    const auto a = extract_stages(images, spec, init_backbone_params(spec, 7), true);
    const auto b = extract_stages(images, spec, init_backbone_params(spec, 7), true);
    for (int i = 0; i < 4; ++i) {
      CHECK(std::equal(a.stages[i].values().begin(), a.stages[i].values().end(), b.stages[i].values().begin()));
    }
  }
}

TEST_CASE("input gradients of the toy backbones match finite differences") {
  for (auto kind : {BackboneKind::toy_residual, BackboneKind::toy_windowed}) {
    std::mt19937_64 rng(8);
    const auto spec = BackboneSpec::defaults(kind);
    const auto params = init_backbone_params(spec, 8);
    Var images = Var::leaf({1, 3, 32, 32}, testing::random_values(rng, 3 * 32 * 32, 0.2, 0.8), true);
    std::array<std::vector<double>, 4> weights;
    for (int i = 0; i < 4; ++i) weights[i] = testing::random_values(rng, spec.stage_channels[i] * (64 >> (2 * i)));
    auto objective = [&] {
      const auto out = extract_stages(images, spec, params);
      Var total = ops::dot_constant(out.stages[0], weights[0]);
      for (int i = 1; i < 4; ++i) total = ops::add(total, ops::dot_constant(out.stages[i], weights[i]));
      return total;
    };
    objective().backward();
    const std::vector<double> analytic(images.grad().begin(), images.grad().end());
    std::uniform_int_distribution<Index> pick(0, images.numel() - 1);
    double diff = 0, norm = 0;
    for (int s = 0; s < 24; ++s) {
      const auto i = static_cast<std::size_t>(pick(rng));
      auto values = images.mutable_values();
      const double saved = values[i];
      NoGradGuard guard;
      values[i] = saved + 1e-5;
      const double up = objective().item();
      values[i] = saved - 1e-5;
      const double down = objective().item();
      values[i] = saved;
      const double numeric = (up - down) / 2e-5;
      diff += (numeric - analytic[i]) * (numeric - analytic[i]);
      norm += numeric * numeric;
    }
    INFO(to_string(kind));
    CHECK(std::sqrt(diff / norm) < 1e-5);
  }
}
