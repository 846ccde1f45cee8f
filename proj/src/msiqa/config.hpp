// SPDX-License-Identifier: Apache-2.0
//
// Training/evaluation configuration and its text form: one `key = value`
// per line, `#` starts a comment. The key table in config.cpp is the schema;
// `describe_keys()` prints it.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msiqa/backbones.hpp"
#include "msiqa/dataset.hpp"
#include "msiqa/fusion.hpp"
#include "msiqa/objectives.hpp"
#include "msiqa/regressor.hpp"

namespace msiqa {

struct TrainConfig {
  // Optimization.
  double learning_rate = 1e-5;
  Index batch_size = 16;
  Index epochs = 1;
  Index max_steps = 0;  // 0: no step limit
  std::uint64_t seed = 0;
  bool deterministic = true;
  Index workers = 1;
  bool eval_each_epoch = true;

  Index input_resolution = 224;

  // Backbones.
  backbones::BackboneKind residual_backbone = backbones::BackboneKind::residual50;
  backbones::StageChannels residual_channels{};  // zeros: the kind's default
  std::string residual_checkpoint;
  backbones::BackboneKind windowed_backbone = backbones::BackboneKind::windowed_tiny;
  backbones::StageChannels windowed_channels{};
  std::string windowed_checkpoint;
  Index window_size = 0;
  bool freeze_backbones = false;

  fusion::FusionConfig fusion;
  regressor::RegressorConfig regressor;
  objectives::LossConfig loss;

  // Ablations. The weight-branch flag lives in `regressor`, the MSFFM flag in
  // fusion.use_attention and the stage subset in fusion.stage_count.
  bool use_rm = true;
  bool use_stm = true;

  dataset::Split eval_split = dataset::Split::test;

  // Throws invalid_argument naming the offending key.
  void validate() const;

  std::optional<backbones::BackboneSpec> residual_spec() const;
  std::optional<backbones::BackboneSpec> windowed_spec() const;
  fusion::FusionInputs fusion_inputs() const;

  // Toy backbones at 64x64 with widths small enough for CPU tests.
  static TrainConfig toy();
};

// Applies one key. Throws invalid_argument for unknown keys or bad values.
void set_option(TrainConfig& cfg, std::string_view key, std::string_view value);
// "key=value" form used by command-line overrides.
void apply_override(TrainConfig& cfg, std::string_view assignment);

TrainConfig parse_config(std::string_view text);
TrainConfig load_config(const std::filesystem::path& path);
// Applies the keys set by `text` / the file on top of cfg.
void apply_config_text(TrainConfig& cfg, std::string_view text);
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);

// Every key with its current value, in schema order.
std::vector<std::pair<std::string, std::string>> to_key_values(const TrainConfig& cfg);
std::string format_config(const TrainConfig& cfg);

struct KeyDoc {
  std::string key;
  std::string default_value;
  std::string help;
};
std::vector<KeyDoc> describe_keys();

}  // namespace msiqa
