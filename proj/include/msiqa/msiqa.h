/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface of the msiqa image-quality library.
 *
 * Every function returning msiqa_status reports failures through the status
 * code; msiqa_last_error() then holds a message for the calling thread.
 * Handles are opaque and released with their *_destroy function. Strings
 * returned by accessors are owned by the handle and stay valid until the
 * handle is destroyed or the accessor is called again.
 */
#ifndef MSIQA_MSIQA_H
#define MSIQA_MSIQA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(MSIQA_BUILDING_LIBRARY)
#    define MSIQA_API __declspec(dllexport)
#  else
#    define MSIQA_API __declspec(dllimport)
#  endif
#else
#  define MSIQA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum msiqa_status {
  MSIQA_OK = 0,
  MSIQA_ERR_INVALID_ARGUMENT = 1,
  MSIQA_ERR_SHAPE_MISMATCH = 2,
  MSIQA_ERR_PARAMETER_MISMATCH = 3,
  MSIQA_ERR_IO = 4,
  MSIQA_ERR_FORMAT = 5,
  MSIQA_ERR_UNDEFINED_METRIC = 6,
  MSIQA_ERR_CODEC = 7,
  MSIQA_ERR_INTERNAL = 8
} msiqa_status;

typedef enum msiqa_oracle {
  MSIQA_ORACLE_NONE = 0,
  MSIQA_ORACLE_TRUTH = 1,
  MSIQA_ORACLE_NEGATED_TRUTH = 2
} msiqa_oracle;

typedef struct msiqa_config msiqa_config;
typedef struct msiqa_model msiqa_model;
typedef struct msiqa_report msiqa_report;

typedef struct msiqa_train_summary {
  double initial_loss;
  double final_loss;
  int64_t steps;
} msiqa_train_summary;

typedef void (*msiqa_log_fn)(const char* line, void* user_data);

MSIQA_API const char* msiqa_version(void);
MSIQA_API const char* msiqa_status_string(msiqa_status status);
/* Message of the last failed call on this thread; "" if none. */
MSIQA_API const char* msiqa_last_error(void);

/* Configuration. */
MSIQA_API msiqa_status msiqa_config_create(msiqa_config** out);
/* Toy backbones at 64x64, for tests and demos. */
MSIQA_API msiqa_status msiqa_config_create_toy(msiqa_config** out);
MSIQA_API void msiqa_config_destroy(msiqa_config* cfg);
MSIQA_API msiqa_status msiqa_config_set(msiqa_config* cfg, const char* key, const char* value);
/* Applies a `key = value` file on top of the current values. */
MSIQA_API msiqa_status msiqa_config_load_file(msiqa_config* cfg, const char* path);
MSIQA_API msiqa_status msiqa_config_get(msiqa_config* cfg, const char* key, const char** value);
MSIQA_API msiqa_status msiqa_config_validate(const msiqa_config* cfg);
/* Whole configuration in file form. */
MSIQA_API const char* msiqa_config_text(msiqa_config* cfg);
/* Documentation of every key with its default. */
MSIQA_API const char* msiqa_config_schema(void);

/* Dataset tooling. */
MSIQA_API msiqa_status msiqa_build_dataset(const char* pristine_dir, const char* out_dir, uint64_t seed,
                                           double train_fraction, size_t workers, size_t* n_entries);
/* mode: "recipe" or "psnr"; pristine_dir is required for "psnr" only. */
MSIQA_API msiqa_status msiqa_synth_labels(const char* manifest_in, const char* manifest_out, const char* mode,
                                          const char* pristine_dir);
/* Scores each entry with the mean of its raters (CSV path,r1,...,rk). */
MSIQA_API msiqa_status msiqa_apply_rater_scores(const char* manifest_in, const char* raters_csv,
                                                const char* manifest_out);

/* Models. */
MSIQA_API msiqa_status msiqa_model_create(const msiqa_config* cfg, msiqa_model** out);
MSIQA_API msiqa_status msiqa_model_load(const char* path, msiqa_model** out);
MSIQA_API msiqa_status msiqa_model_save(const msiqa_model* model, const char* path);
MSIQA_API void msiqa_model_destroy(msiqa_model* model);
/* Copy of the model's configuration. */
MSIQA_API msiqa_status msiqa_model_config(const msiqa_model* model, msiqa_config** out);
MSIQA_API msiqa_status msiqa_model_parameter_count(const msiqa_model* model, int64_t* count);

MSIQA_API msiqa_status msiqa_train(msiqa_model* model, const char* manifest_path, msiqa_log_fn log,
                                   void* user_data, msiqa_train_summary* summary);
/* split: "train", "test" or NULL for the configured eval split. */
MSIQA_API msiqa_status msiqa_evaluate(const msiqa_model* model, const char* manifest_path, const char* split,
                                      msiqa_oracle oracle, msiqa_report** out);
MSIQA_API msiqa_status msiqa_score_image(const msiqa_model* model, const char* image_path, double* score);
/* Writes F1.png..F4.png, FW.png and FS.png into out_dir. */
MSIQA_API msiqa_status msiqa_export_features(const msiqa_model* model, const char* image_path,
                                             const char* out_dir);

/* Evaluation reports. */
MSIQA_API void msiqa_report_destroy(msiqa_report* report);
MSIQA_API double msiqa_report_srocc(const msiqa_report* report);
MSIQA_API double msiqa_report_plcc(const msiqa_report* report);
MSIQA_API int64_t msiqa_report_size(const msiqa_report* report);
MSIQA_API msiqa_status msiqa_report_row(const msiqa_report* report, int64_t index, const char** path,
                                        double* target, double* prediction);
MSIQA_API const char* msiqa_report_table(msiqa_report* report);
MSIQA_API const char* msiqa_report_predictions_csv(msiqa_report* report);
MSIQA_API const char* msiqa_report_metrics_csv(msiqa_report* report);

#ifdef __cplusplus
}
#endif

#endif /* MSIQA_MSIQA_H */
