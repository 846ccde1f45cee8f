// SPDX-License-Identifier: Apache-2.0
#include "msiqa/msiqa.h"

#include <exception>
#include <new>
#include <string>

#include "msiqa/config.hpp"
#include "msiqa/dataset.hpp"
#include "msiqa/errors.hpp"
#include "msiqa/harness.hpp"
#include "msiqa/model.hpp"

struct msiqa_config {
  msiqa::TrainConfig cfg;
  std::string text;
  std::string value;
};

struct msiqa_model {
  msiqa::Model model;
};

struct msiqa_report {
  msiqa::harness::EvalReport report;
  std::string text;
};

namespace {

thread_local std::string last_error;

msiqa_status to_status(msiqa::ErrorCode code) {
  switch (code) {
    case msiqa::ErrorCode::invalid_argument: return MSIQA_ERR_INVALID_ARGUMENT;
    case msiqa::ErrorCode::shape_mismatch: return MSIQA_ERR_SHAPE_MISMATCH;
    case msiqa::ErrorCode::parameter_mismatch: return MSIQA_ERR_PARAMETER_MISMATCH;
    case msiqa::ErrorCode::io: return MSIQA_ERR_IO;
    case msiqa::ErrorCode::format: return MSIQA_ERR_FORMAT;
    case msiqa::ErrorCode::undefined_metric: return MSIQA_ERR_UNDEFINED_METRIC;
    case msiqa::ErrorCode::codec: return MSIQA_ERR_CODEC;
    case msiqa::ErrorCode::internal: return MSIQA_ERR_INTERNAL;
  }
  return MSIQA_ERR_INTERNAL;
}

template <typename F>
msiqa_status guarded(F&& body) {
  try {
    last_error.clear();
    body();
    return MSIQA_OK;
  } catch (const msiqa::Error& e) {
    last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return MSIQA_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return MSIQA_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown failure";
    return MSIQA_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) msiqa::fail(msiqa::ErrorCode::invalid_argument, "{} must not be null", what);
}

msiqa::dataset::Split split_or(const char* text, msiqa::dataset::Split fallback) {
  return text ? msiqa::dataset::parse_split(text) : fallback;
}

}  // namespace

extern "C" {

const char* msiqa_version(void) { return "0.1.0"; }

const char* msiqa_status_string(msiqa_status status) {
  switch (status) {
    case MSIQA_OK: return "ok";
    case MSIQA_ERR_INVALID_ARGUMENT: return "invalid argument";
    case MSIQA_ERR_SHAPE_MISMATCH: return "shape mismatch";
    case MSIQA_ERR_PARAMETER_MISMATCH: return "parameter mismatch";
    case MSIQA_ERR_IO: return "i/o error";
    case MSIQA_ERR_FORMAT: return "format error";
    case MSIQA_ERR_UNDEFINED_METRIC: return "undefined metric";
    case MSIQA_ERR_CODEC: return "codec error";
    case MSIQA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* msiqa_last_error(void) { return last_error.c_str(); }

msiqa_status msiqa_config_create(msiqa_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new msiqa_config{};
  });
}

msiqa_status msiqa_config_create_toy(msiqa_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new msiqa_config{msiqa::TrainConfig::toy(), {}, {}};
  });
}

void msiqa_config_destroy(msiqa_config* cfg) { delete cfg; }

msiqa_status msiqa_config_set(msiqa_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    msiqa::set_option(cfg->cfg, key, value);
  });
}

msiqa_status msiqa_config_load_file(msiqa_config* cfg, const char* path) {
  return guarded([&] {
    require(cfg, "cfg");
    require(path, "path");
    msiqa::TrainConfig updated = cfg->cfg;
    msiqa::apply_config_file(updated, path);
    cfg->cfg = updated;
  });
}

msiqa_status msiqa_config_get(msiqa_config* cfg, const char* key, const char** value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    for (const auto& [k, v] : msiqa::to_key_values(cfg->cfg)) {
      if (k == key) {
        cfg->value = v;
        *value = cfg->value.c_str();
        return;
      }
    }
    msiqa::fail(msiqa::ErrorCode::invalid_argument, "unknown configuration key '{}'", key);
  });
}

msiqa_status msiqa_config_validate(const msiqa_config* cfg) {
  return guarded([&] {
    require(cfg, "cfg");
    cfg->cfg.validate();
  });
}

const char* msiqa_config_text(msiqa_config* cfg) {
  if (!cfg) return nullptr;
  cfg->text = msiqa::format_config(cfg->cfg);
  return cfg->text.c_str();
}

const char* msiqa_config_schema(void) {
  static const std::string text = [] {
    std::string out;
    for (const auto& doc : msiqa::describe_keys()) {
      out += fmt::format("{:<22} {:<14} {}\n", doc.key, doc.default_value, doc.help);
    }
    return out;
  }();
  return text.c_str();
}

msiqa_status msiqa_build_dataset(const char* pristine_dir, const char* out_dir, uint64_t seed,
                                 double train_fraction, size_t workers, size_t* n_entries) {
  return guarded([&] {
    require(pristine_dir, "pristine_dir");
    require(out_dir, "out_dir");
    msiqa::dataset::BuildOptions options;
    options.seed = seed;
    options.train_fraction = train_fraction;
    options.workers = workers == 0 ? 1 : workers;
    const auto manifest = msiqa::dataset::build_dataset(pristine_dir, out_dir, options);
    if (n_entries) *n_entries = manifest.entries.size();
  });
}

msiqa_status msiqa_synth_labels(const char* manifest_in, const char* manifest_out, const char* mode,
                                const char* pristine_dir) {
  return guarded([&] {
    require(manifest_in, "manifest_in");
    require(manifest_out, "manifest_out");
    require(mode, "mode");
    std::optional<std::filesystem::path> pristine;
    if (pristine_dir) pristine = pristine_dir;
    auto manifest = msiqa::dataset::read_manifest(manifest_in);
    manifest = msiqa::harness::synth_labels(std::move(manifest), msiqa::harness::parse_label_mode(mode), pristine);
    msiqa::dataset::write_manifest(manifest, manifest_out);
  });
}

msiqa_status msiqa_apply_rater_scores(const char* manifest_in, const char* raters_csv, const char* manifest_out) {
  return guarded([&] {
    require(manifest_in, "manifest_in");
    require(raters_csv, "raters_csv");
    require(manifest_out, "manifest_out");
    auto manifest = msiqa::dataset::read_manifest(manifest_in);
    msiqa::dataset::apply_rater_scores(manifest, msiqa::dataset::read_rater_scores(raters_csv));
    msiqa::dataset::write_manifest(manifest, manifest_out);
  });
}

msiqa_status msiqa_model_create(const msiqa_config* cfg, msiqa_model** out) {
  return guarded([&] {
    require(cfg, "cfg");
    require(out, "out");
    *out = new msiqa_model{msiqa::Model(cfg->cfg)};
  });
}

msiqa_status msiqa_model_load(const char* path, msiqa_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new msiqa_model{msiqa::Model::load(path)};
  });
}

msiqa_status msiqa_model_save(const msiqa_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    model->model.save(path);
  });
}

void msiqa_model_destroy(msiqa_model* model) { delete model; }

msiqa_status msiqa_model_config(const msiqa_model* model, msiqa_config** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = new msiqa_config{model->model.config(), {}, {}};
  });
}

msiqa_status msiqa_model_parameter_count(const msiqa_model* model, int64_t* count) {
  return guarded([&] {
    require(model, "model");
    require(count, "count");
    *count = model->model.parameters().scalar_count();
  });
}

msiqa_status msiqa_train(msiqa_model* model, const char* manifest_path, msiqa_log_fn log, void* user_data,
                         msiqa_train_summary* summary) {
  return guarded([&] {
    require(model, "model");
    require(manifest_path, "manifest_path");
    const auto manifest = msiqa::dataset::read_manifest(manifest_path);
    msiqa::harness::LogSink sink;
    if (log) sink = [log, user_data](const std::string& line) { log(line.c_str(), user_data); };
    const auto result = msiqa::harness::train(model->model, manifest, sink);
    if (summary) *summary = {result.initial_loss, result.final_loss, result.steps};
  });
}

msiqa_status msiqa_evaluate(const msiqa_model* model, const char* manifest_path, const char* split,
                            msiqa_oracle oracle, msiqa_report** out) {
  return guarded([&] {
    require(model, "model");
    require(manifest_path, "manifest_path");
    require(out, "out");
    msiqa::harness::Oracle mode;
    switch (oracle) {
      case MSIQA_ORACLE_NONE: mode = msiqa::harness::Oracle::none; break;
      case MSIQA_ORACLE_TRUTH: mode = msiqa::harness::Oracle::truth; break;
      case MSIQA_ORACLE_NEGATED_TRUTH: mode = msiqa::harness::Oracle::negated_truth; break;
      default: msiqa::fail(msiqa::ErrorCode::invalid_argument, "unknown oracle mode {}", static_cast<int>(oracle));
    }
    const auto manifest = msiqa::dataset::read_manifest(manifest_path);
    auto report = msiqa::harness::evaluate(model->model, manifest,
                                           split_or(split, model->model.config().eval_split), mode);
    *out = new msiqa_report{std::move(report), {}};
  });
}

msiqa_status msiqa_score_image(const msiqa_model* model, const char* image_path, double* score) {
  return guarded([&] {
    require(model, "model");
    require(image_path, "image_path");
    require(score, "score");
    *score = msiqa::harness::score_image(model->model, image_path);
  });
}

msiqa_status msiqa_export_features(const msiqa_model* model, const char* image_path, const char* out_dir) {
  return guarded([&] {
    require(model, "model");
    require(image_path, "image_path");
    require(out_dir, "out_dir");
    msiqa::harness::export_feature_maps(model->model, image_path, out_dir);
  });
}

void msiqa_report_destroy(msiqa_report* report) { delete report; }

double msiqa_report_srocc(const msiqa_report* report) { return report ? report->report.srocc : 0.0; }

double msiqa_report_plcc(const msiqa_report* report) { return report ? report->report.plcc : 0.0; }

int64_t msiqa_report_size(const msiqa_report* report) { return report ? report->report.n_images : 0; }

msiqa_status msiqa_report_row(const msiqa_report* report, int64_t index, const char** path, double* target,
                              double* prediction) {
  return guarded([&] {
    require(report, "report");
    const auto& rows = report->report.rows;
    if (index < 0 || index >= static_cast<int64_t>(rows.size())) {
      msiqa::fail(msiqa::ErrorCode::invalid_argument, "row {} outside 0..{}", index, rows.size());
    }
    const auto& row = rows[static_cast<std::size_t>(index)];
    if (path) *path = row.path.c_str();
    if (target) *target = row.target;
    if (prediction) *prediction = row.prediction;
  });
}

const char* msiqa_report_table(msiqa_report* report) {
  if (!report) return nullptr;
  report->text = report->report.table();
  return report->text.c_str();
}

const char* msiqa_report_predictions_csv(msiqa_report* report) {
  if (!report) return nullptr;
  report->text = report->report.predictions_csv();
  return report->text.c_str();
}

const char* msiqa_report_metrics_csv(msiqa_report* report) {
  if (!report) return nullptr;
  report->text = report->report.metrics_csv();
  return report->text.c_str();
}

}  // extern "C"
