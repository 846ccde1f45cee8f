// SPDX-License-Identifier: Apache-2.0
//
// The full quality model: up to two backbones, fusion and the two-branch
// regressor, assembled from a TrainConfig. Parameters live in one ParameterSet
// under the checkpoint names
//
//   backbone.residual.*  backbone.windowed.*
//   fusion.reduce.stage{i}.*  agca.stage{i}.*  agca.fs.*
//   regressor.score.*  regressor.weight.*
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msiqa/config.hpp"
#include "msiqa/image.hpp"

namespace msiqa {

struct ModelOutput {
  std::optional<backbones::StageFeatures> residual;
  std::optional<backbones::StageFeatures> windowed;
  fusion::FusedVectors fused;
  regressor::Prediction prediction;
};

class Model {
 public:
  // Random initialization seeded from cfg.seed, then any backbone checkpoints
  // named in the config.
  explicit Model(TrainConfig cfg);

  // Restores parameters and configuration written by save().
  static Model load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const TrainConfig& config() const { return cfg_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Parameters updated by training (backbones excluded when frozen).
  std::vector<Var> trainable() const;

  // images: (N, 3, R, R) with R = input_resolution.
  ModelOutput forward(const Var& images, bool training = false) const;
  // Scores of a batch, evaluation mode, no gradient.
  std::vector<double> score(const Var& images) const;

  // Reads a raster file, replicates grey to RGB and resizes to R x R.
  imaging::Image ingest(const std::filesystem::path& path) const;
  imaging::Image prepare(const imaging::Image& image) const;

  // Notes from loading backbone checkpoints (missing / unused tensors).
  const std::vector<std::string>& load_notes() const { return notes_; }

 private:
  Model(TrainConfig cfg, bool initialize_backbones_from_files);

  TrainConfig cfg_;
  std::optional<backbones::BackboneSpec> residual_;
  std::optional<backbones::BackboneSpec> windowed_;
  ParameterSet params_;
  ParameterSet residual_params_;
  ParameterSet windowed_params_;
  std::vector<std::string> notes_;
};

}  // namespace msiqa
