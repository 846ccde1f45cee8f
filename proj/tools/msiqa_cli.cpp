// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end over the msiqa C API.
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "msiqa/msiqa.h"

namespace {

class Failure : public std::exception {
 public:
  explicit Failure(int code) : code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

void check(msiqa_status status, const char* action) {
  if (status == MSIQA_OK) return;
  std::fprintf(stderr, "msiqa: %s failed (%s): %s\n", action, msiqa_status_string(status), msiqa_last_error());
  throw Failure(static_cast<int>(status) + 1);
}

void write_text(const std::string& path, const char* text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) {
    std::fprintf(stderr, "msiqa: cannot write '%s'\n", path.c_str());
    throw Failure(static_cast<int>(MSIQA_ERR_IO) + 1);
  }
}

template <typename T, void (*Destroy)(T*)>
struct Handle {
  T* ptr = nullptr;
  ~Handle() { Destroy(ptr); }
};
using ConfigHandle = Handle<msiqa_config, msiqa_config_destroy>;
using ModelHandle = Handle<msiqa_model, msiqa_model_destroy>;
using ReportHandle = Handle<msiqa_report, msiqa_report_destroy>;

void print_line(const char* line, void*) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale no-reference image quality assessment"};
  app.require_subcommand(1);
  app.set_version_flag("--version", msiqa_version());

  // build-dataset
  std::string pristine_dir, out_dir;
  uint64_t build_seed = 0;
  double train_fraction = 0.8;
  size_t workers = 1;
  auto* build = app.add_subcommand("build-dataset", "synthesize 27 degraded variants per pristine image");
  build->add_option("--pristine", pristine_dir, "directory of {patient}_{slice}.png images")->required();
  build->add_option("--out", out_dir, "output directory (images/ and manifest.csv)")->required();
  build->add_option("--seed", build_seed, "synthesis and split seed");
  build->add_option("--train-fraction", train_fraction, "fraction of patients in the train split");
  build->add_option("--workers", workers, "generation threads");

  // synth-labels
  std::string manifest_in, manifest_out, label_mode, label_pristine, raters_csv;
  auto* labels = app.add_subcommand("synth-labels", "fill manifest scores (recipe, psnr or rater mode)");
  labels->add_option("--manifest", manifest_in, "input manifest")->required();
  labels->add_option("--out", manifest_out, "output manifest (default: overwrite input)");
  labels->add_option("--mode", label_mode, "recipe, psnr or raters")
      ->required()
      ->check(CLI::IsMember({"recipe", "psnr", "raters"}));
  labels->add_option("--pristine", label_pristine, "pristine directory (psnr mode)");
  labels->add_option("--raters", raters_csv, "CSV path,r1,...,rk (raters mode)");

  // shared model options
  std::string config_file, checkpoint, manifest, image, init_checkpoint, csv_out, metrics_out, split, oracle;
  std::vector<std::string> overrides;

  auto* train = app.add_subcommand("train", "train a model on the manifest's train split");
  train->add_option("--manifest", manifest, "labelled manifest")->required();
  train->add_option("--out", checkpoint, "checkpoint to write")->required();
  train->add_option("--config", config_file, "key = value configuration file");
  train->add_option("--set", overrides, "key=value override (repeatable)");
  train->add_option("--init", init_checkpoint, "continue from this checkpoint instead of a fresh model");

  auto* eval = app.add_subcommand("eval", "score a manifest split and report SROCC/PLCC");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--manifest", manifest, "labelled manifest")->required();
  eval->add_option("--split", split, "train or test (default: the configured eval split)")
      ->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--csv", csv_out, "write per-image predictions as CSV");
  eval->add_option("--metrics-csv", metrics_out, "write split,n_images,srocc,plcc as CSV");
  eval->add_option("--oracle", oracle, "none, truth or negated (sanity modes)")
      ->check(CLI::IsMember({"none", "truth", "negated"}));

  auto* score = app.add_subcommand("score", "score a single image");
  score->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  score->add_option("--image", image, "image file")->required();

  std::string feature_dir;
  auto* features = app.add_subcommand("export-features", "write F1..F4, FW and FS visualizations");
  features->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  features->add_option("--image", image, "image file")->required();
  features->add_option("--out", feature_dir, "output directory")->required();

  bool toy_defaults = false;
  auto* config = app.add_subcommand("config", "print the configuration schema or a resolved configuration");
  config->add_option("--config", config_file, "configuration file to resolve");
  config->add_option("--set", overrides, "key=value override (repeatable)");
  config->add_flag("--toy", toy_defaults, "start from the toy preset");
  train->add_flag("--toy", toy_defaults, "start from the toy preset (toy backbones, 64x64)");

  CLI11_PARSE(app, argc, argv);

  auto resolve_config = [&](ConfigHandle& cfg) {
    check(toy_defaults ? msiqa_config_create_toy(&cfg.ptr) : msiqa_config_create(&cfg.ptr), "config");
    if (!config_file.empty()) check(msiqa_config_load_file(cfg.ptr, config_file.c_str()), "reading config");
    for (const auto& assignment : overrides) {
      const auto eq = assignment.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "msiqa: override '%s' is not key=value\n", assignment.c_str());
        throw Failure(static_cast<int>(MSIQA_ERR_INVALID_ARGUMENT) + 1);
      }
      const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
      check(msiqa_config_set(cfg.ptr, key.c_str(), value.c_str()), "applying override");
    }
    check(msiqa_config_validate(cfg.ptr), "validating config");
  };

  try {
    if (*build) {
      size_t n = 0;
      check(msiqa_build_dataset(pristine_dir.c_str(), out_dir.c_str(), build_seed, train_fraction, workers, &n),
            "build-dataset");
      std::printf("wrote %zu entries to %s/manifest.csv\n", n, out_dir.c_str());
    } else if (*labels) {
      const std::string target = manifest_out.empty() ? manifest_in : manifest_out;
      if (label_mode == "raters") {
        if (raters_csv.empty()) {
          std::fprintf(stderr, "msiqa: raters mode needs --raters\n");
          return static_cast<int>(MSIQA_ERR_INVALID_ARGUMENT) + 1;
        }
        check(msiqa_apply_rater_scores(manifest_in.c_str(), raters_csv.c_str(), target.c_str()), "synth-labels");
      } else {
        check(msiqa_synth_labels(manifest_in.c_str(), target.c_str(), label_mode.c_str(),
                                 label_pristine.empty() ? nullptr : label_pristine.c_str()),
              "synth-labels");
      }
      std::printf("labelled manifest written to %s\n", target.c_str());
    } else if (*train) {
      ModelHandle model;
      if (!init_checkpoint.empty()) {
        if (!config_file.empty() || !overrides.empty() || toy_defaults) {
          std::fprintf(stderr, "msiqa: --init takes its configuration from the checkpoint\n");
          return static_cast<int>(MSIQA_ERR_INVALID_ARGUMENT) + 1;
        }
        check(msiqa_model_load(init_checkpoint.c_str(), &model.ptr), "loading checkpoint");
      } else {
        ConfigHandle cfg;
        resolve_config(cfg);
        check(msiqa_model_create(cfg.ptr, &model.ptr), "building model");
      }
      msiqa_train_summary summary{};
      check(msiqa_train(model.ptr, manifest.c_str(), print_line, nullptr, &summary), "train");
      check(msiqa_model_save(model.ptr, checkpoint.c_str()), "saving checkpoint");
      std::printf("saved %s (loss %.6g -> %.6g over %lld steps)\n", checkpoint.c_str(), summary.initial_loss,
                  summary.final_loss, static_cast<long long>(summary.steps));
    } else if (*eval) {
      ModelHandle model;
      check(msiqa_model_load(checkpoint.c_str(), &model.ptr), "loading checkpoint");
      msiqa_oracle mode = MSIQA_ORACLE_NONE;
      if (oracle == "truth") mode = MSIQA_ORACLE_TRUTH;
      if (oracle == "negated") mode = MSIQA_ORACLE_NEGATED_TRUTH;
      ReportHandle report;
      check(msiqa_evaluate(model.ptr, manifest.c_str(), split.empty() ? nullptr : split.c_str(), mode, &report.ptr),
            "eval");
      std::fputs(msiqa_report_table(report.ptr), stdout);
      if (!csv_out.empty()) write_text(csv_out, msiqa_report_predictions_csv(report.ptr));
      if (!metrics_out.empty()) write_text(metrics_out, msiqa_report_metrics_csv(report.ptr));
    } else if (*score) {
      ModelHandle model;
      check(msiqa_model_load(checkpoint.c_str(), &model.ptr), "loading checkpoint");
      double value = 0;
      check(msiqa_score_image(model.ptr, image.c_str(), &value), "score");
      std::printf("%.17g\n", value);
    } else if (*features) {
      ModelHandle model;
      check(msiqa_model_load(checkpoint.c_str(), &model.ptr), "loading checkpoint");
      check(msiqa_export_features(model.ptr, image.c_str(), feature_dir.c_str()), "export-features");
      std::printf("wrote F1.png F2.png F3.png F4.png FW.png FS.png to %s\n", feature_dir.c_str());
    } else if (*config) {
      if (config_file.empty() && overrides.empty() && !toy_defaults) {
        std::fputs(msiqa_config_schema(), stdout);
      } else {
        ConfigHandle cfg;
        resolve_config(cfg);
        std::fputs(msiqa_config_text(cfg.ptr), stdout);
      }
    }
  } catch (const Failure& f) {
    return f.code();
  }
  return 0;
}
