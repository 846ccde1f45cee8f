// SPDX-License-Identifier: Apache-2.0
//
// Training and evaluation loops, single-image scoring, feature-map export and
// synthetic labelling for desk-scale runs.
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msiqa/dataset.hpp"
#include "msiqa/model.hpp"

namespace msiqa::harness {

class Adam {
 public:
  Adam(std::vector<Var> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  // Consumes the accumulated gradients; parameters without one are skipped.
  void step();
  Index steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  Index t_ = 0;
};

struct EpochRecord {
  Index epoch = 0;
  Index steps = 0;             // cumulative
  double mean_batch_loss = 0;  // over the epoch's minibatches
  std::optional<double> eval_srocc;
  std::optional<double> eval_plcc;
  std::string eval_note;  // why metrics are absent, if they are
};

struct TrainLog {
  double initial_loss = 0;  // total loss over the train split, evaluation mode, before step 1
  double final_loss = 0;    // same, after the last step
  Index steps = 0;
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
};

using LogSink = std::function<void(const std::string&)>;

// Minimizes the total loss on the manifest's train split with Adam and a
// global per-epoch shuffle. Every train entry needs a score.
TrainLog train(Model& model, const dataset::Manifest& manifest, const LogSink& log = {});

// Total loss of the current model over `entries` (evaluation mode).
double dataset_loss(const Model& model, const dataset::Manifest& manifest,
                    const std::vector<const dataset::ManifestEntry*>& entries);

struct PredictionRow {
  std::string path;
  double target = 0;
  double prediction = 0;
};

struct EvalReport {
  dataset::Split split = dataset::Split::test;
  double srocc = 0;
  double plcc = 0;
  Index n_images = 0;
  std::vector<PredictionRow> rows;

  std::string table() const;
  // path,target,prediction
  std::string predictions_csv() const;
  // split,n_images,srocc,plcc
  std::string metrics_csv() const;
};

enum class Oracle { none, truth, negated_truth };

// Per-image scores through score_image's code path. Throws undefined_metric
// (with the offending values) when predictions or targets are constant.
EvalReport evaluate(const Model& model, const dataset::Manifest& manifest, dataset::Split split,
                    Oracle oracle = Oracle::none);

double score_image(const Model& model, const std::filesystem::path& image_path);
double score_prepared(const Model& model, const imaging::Image& prepared);

// Writes F1.png..F4.png (channel-mean heatmaps at input size) and FW.png,
// FS.png (strips of the fused vectors before pooling). Returns the paths.
std::vector<std::filesystem::path> export_feature_maps(const Model& model, const std::filesystem::path& image_path,
                                                       const std::filesystem::path& out_dir);

enum class LabelMode { recipe, psnr };
LabelMode parse_label_mode(std::string_view text);

// 4 − (p+g+j−3)/6·4.
double recipe_label(const dataset::DistortionRecipe& recipe);

// recipe: label from the distortion levels. psnr: PSNR against
// pristine_dir/{patient}_{slice}.png mapped affinely onto [0, 4] (max PSNR
// gets 4); equal PSNRs all get 2.
dataset::Manifest synth_labels(dataset::Manifest manifest, LabelMode mode,
                               const std::optional<std::filesystem::path>& pristine_dir = std::nullopt);

}  // namespace msiqa::harness
