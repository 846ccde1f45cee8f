// SPDX-License-Identifier: Apache-2.0
//
// Degraded-image dataset factory: mixed Poisson/Gaussian/JPEG distortion at
// three levels each, rater-score aggregation, patient-disjoint splitting and
// the CSV manifest format
//
//   path,patient_id,slice_id,poisson,gaussian,jpeg,score,split
//
// with paths relative to the manifest's directory and an empty score for
// unlabeled entries.
#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msiqa/image.hpp"

namespace msiqa::dataset {

struct DistortionRecipe {
  int poisson = 1;
  int gaussian = 1;
  int jpeg = 1;

  void validate() const;
  std::string tag() const;  // "p1g2j3"
  auto operator<=>(const DistortionRecipe&) const = default;
};

// All 27 recipes in lexicographic (poisson, gaussian, jpeg) order.
std::vector<DistortionRecipe> all_recipes();

// Per-level severities, index 0 = level 1.
struct DistortionLevels {
  std::array<double, 3> poisson_peak{120.0, 60.0, 30.0};   // photon count at intensity 1
  std::array<double, 3> gaussian_sigma{0.02, 0.06, 0.10};  // in [0, 1] units
  std::array<int, 3> jpeg_quality{60, 30, 10};
};

// x -> Poisson(x·λ)/λ, clipped to [0, 1].
imaging::Image apply_poisson(const imaging::Image& image, int level, std::uint64_t seed,
                             const DistortionLevels& levels = {});
// x -> x + N(0, σ²), clipped to [0, 1].
imaging::Image apply_gaussian(const imaging::Image& image, int level, std::uint64_t seed,
                              const DistortionLevels& levels = {});
imaging::Image apply_jpeg(const imaging::Image& image, int level, const DistortionLevels& levels = {});
// Poisson, then Gaussian, then JPEG.
imaging::Image apply_recipe(const imaging::Image& image, const DistortionRecipe& recipe,
                            std::uint64_t seed, const DistortionLevels& levels = {});

// Stable across platforms and runs.
std::uint64_t image_seed(std::uint64_t global_seed, std::string_view patient, std::string_view slice,
                         const DistortionRecipe& recipe);

enum class Split { train, test };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
  std::string path;
  std::string patient_id;
  std::string slice_id;
  DistortionRecipe recipe;
  std::optional<double> score;
  Split split = Split::train;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory that entry paths are relative to

  std::filesystem::path resolve(const ManifestEntry& entry) const;
  std::vector<const ManifestEntry*> select(Split split) const;
  // Unique paths, scores within [0, 4].
  void validate() const;
};

inline constexpr std::string_view kManifestHeader =
    "path,patient_id,slice_id,poisson,gaussian,jpeg,score,split";

Manifest read_manifest(const std::filesystem::path& path);
// Entry paths are written verbatim; callers keep them relative to `path`.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

double aggregate_scores(std::span<const int> raters);

// CSV "path,r1,...,rk" keyed by path.
std::map<std::string, std::vector<int>> read_rater_scores(const std::filesystem::path& path);
// Fills every entry's score with its raters' mean; entries without ratings error.
void apply_rater_scores(Manifest& manifest, const std::map<std::string, std::vector<int>>& raters);

// ⌊fraction·patients⌋ patients (at least one per side) go to train.
Manifest split_by_patient(Manifest manifest, double train_fraction, std::uint64_t seed);

// "{patient}_{slice}" split at the last underscore.
std::pair<std::string, std::string> parse_pristine_name(std::string_view stem);

struct BuildOptions {
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  DistortionLevels levels;
  std::size_t workers = 1;
};

// Writes 27 variants of each pristine_dir/{patient}_{slice}.png into
// out_dir/images and the manifest to out_dir/manifest.csv. With fewer than
// two patients every entry stays in the train split.
Manifest build_dataset(const std::filesystem::path& pristine_dir, const std::filesystem::path& out_dir,
                       const BuildOptions& options);

}  // namespace msiqa::dataset
