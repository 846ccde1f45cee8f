// SPDX-License-Identifier: Apache-2.0
#include "msiqa/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "msiqa/errors.hpp"

namespace msiqa::dataset {

using msiqa::to_string;

namespace fs = std::filesystem;

namespace {

void require_level(int level, const char* family) {
  if (level < 1 || level > 3) fail(ErrorCode::invalid_argument, "{} level {} outside 1..3", family, level);
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, 8);
  }
  // Length-prefixed so ("ab","c") and ("a","bc") differ.
  void text(std::string_view s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// --- CSV ---------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  if (quoted) fail(ErrorCode::format, "line {}: unterminated quoted field", line_no);
  fields.push_back(std::move(field));
  return fields;
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open '{}'", path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.empty()) continue;
    rows.push_back(split_csv_line(line, line_no));
  }
  return rows;
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) fail(ErrorCode::format, "{}: '{}' is not a number", what, text);
  return value;
}

// --- distortion ----------------------------------------------------------

imaging::Image distort(const imaging::Image& image, const DistortionRecipe& recipe, std::uint64_t seed,
                       const DistortionLevels& levels) {
  const std::uint64_t base = splitmix64(seed);
  imaging::Image out = apply_poisson(image, recipe.poisson, splitmix64(base ^ 1), levels);
  out = apply_gaussian(out, recipe.gaussian, splitmix64(base ^ 2), levels);
  return apply_jpeg(out, recipe.jpeg, levels);
}

}  // namespace

void DistortionRecipe::validate() const {
  require_level(poisson, "poisson");
  require_level(gaussian, "gaussian");
  require_level(jpeg, "jpeg");
}

std::string DistortionRecipe::tag() const { return fmt::format("p{}g{}j{}", poisson, gaussian, jpeg); }

std::vector<DistortionRecipe> all_recipes() {
  std::vector<DistortionRecipe> out;
  out.reserve(27);
  for (int p = 1; p <= 3; ++p) {
    for (int g = 1; g <= 3; ++g) {
      for (int j = 1; j <= 3; ++j) out.push_back({p, g, j});
    }
  }
  return out;
}

imaging::Image apply_poisson(const imaging::Image& image, int level, std::uint64_t seed,
                             const DistortionLevels& levels) {
  require_level(level, "poisson");
  const double peak = levels.poisson_peak[static_cast<std::size_t>(level - 1)];
  if (!(peak > 0.0)) fail(ErrorCode::invalid_argument, "poisson peak must be positive");
  std::mt19937_64 rng(seed);
  imaging::Image out = image;
  for (double& v : out.pixels) {
    const double mean = clip01(v) * peak;
    if (mean <= 0.0) {
      v = 0.0;
      continue;
    }
    std::poisson_distribution<long long> draw(mean);
    v = clip01(static_cast<double>(draw(rng)) / peak);
  }
  return out;
}

imaging::Image apply_gaussian(const imaging::Image& image, int level, std::uint64_t seed,
                              const DistortionLevels& levels) {
  require_level(level, "gaussian");
  const double sigma = levels.gaussian_sigma[static_cast<std::size_t>(level - 1)];
  if (sigma < 0.0) fail(ErrorCode::invalid_argument, "gaussian sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  imaging::Image out = image;
  for (double& v : out.pixels) v = clip01(v + noise(rng));
  return out;
}

imaging::Image apply_jpeg(const imaging::Image& image, int level, const DistortionLevels& levels) {
  require_level(level, "jpeg");
  return imaging::jpeg_round_trip(image, levels.jpeg_quality[static_cast<std::size_t>(level - 1)]);
}

imaging::Image apply_recipe(const imaging::Image& image, const DistortionRecipe& recipe,
                            std::uint64_t seed, const DistortionLevels& levels) {
  recipe.validate();
  return distort(image, recipe, seed, levels);
}

std::uint64_t image_seed(std::uint64_t global_seed, std::string_view patient, std::string_view slice,
                         const DistortionRecipe& recipe) {
  Fnv1a h;
  h.u64(global_seed);
  h.text(patient);
  h.text(slice);
  h.u64(static_cast<std::uint64_t>(recipe.poisson * 100 + recipe.gaussian * 10 + recipe.jpeg));
  return splitmix64(h.value());
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  fail(ErrorCode::format, "unknown split '{}'", text);
}

fs::path Manifest::resolve(const ManifestEntry& entry) const {
  const fs::path p(entry.path);
  return p.is_absolute() ? p : root / p;
}

std::vector<const ManifestEntry*> Manifest::select(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

void Manifest::validate() const {
  std::set<std::string_view> paths;
  for (const auto& e : entries) {
    if (e.path.empty()) fail(ErrorCode::format, "manifest entry with empty path");
    if (!paths.insert(e.path).second) fail(ErrorCode::format, "path '{}' appears twice", e.path);
    e.recipe.validate();
    if (e.score && !(*e.score >= 0.0 && *e.score <= 4.0)) {
      fail(ErrorCode::format, "score {} of '{}' outside [0, 4]", *e.score, e.path);
    }
  }
}

Manifest read_manifest(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) fail(ErrorCode::format, "'{}' is empty", path.string());
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != kManifestHeader) {
    fail(ErrorCode::format, "'{}': expected header '{}', found '{}'", path.string(), kManifestHeader, header);
  }
  Manifest manifest;
  manifest.root = path.parent_path();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (f.size() != 8) fail(ErrorCode::format, "'{}' row {}: {} fields, expected 8", path.string(), r + 1, f.size());
    ManifestEntry e;
    e.path = f[0];
    e.patient_id = f[1];
    e.slice_id = f[2];
    e.recipe = {parse_number<int>(f[3], "poisson"), parse_number<int>(f[4], "gaussian"),
                parse_number<int>(f[5], "jpeg")};
    if (!f[6].empty()) e.score = parse_number<double>(f[6], "score");
    e.split = parse_split(f[7]);
    manifest.entries.push_back(std::move(e));
  }
  manifest.validate();
  return manifest;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  manifest.validate();
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& e : manifest.entries) {
    out << csv_field(e.path) << ',' << csv_field(e.patient_id) << ',' << csv_field(e.slice_id) << ','
        << e.recipe.poisson << ',' << e.recipe.gaussian << ',' << e.recipe.jpeg << ','
        << (e.score ? fmt::format("{}", *e.score) : std::string()) << ',' << to_string(e.split) << '\n';
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorCode::io, "cannot write '{}'", path.string());
  file << out.str();
  if (!file) fail(ErrorCode::io, "write to '{}' failed", path.string());
}

double aggregate_scores(std::span<const int> raters) {
  if (raters.empty()) fail(ErrorCode::invalid_argument, "no rater scores");
  for (int r : raters) {
    if (r < 0 || r > 4) fail(ErrorCode::invalid_argument, "rater score {} outside 0..4", r);
  }
  return std::accumulate(raters.begin(), raters.end(), 0.0) / static_cast<double>(raters.size());
}

std::map<std::string, std::vector<int>> read_rater_scores(const fs::path& path) {
  const auto rows = read_csv(path);
  std::map<std::string, std::vector<int>> out;
  std::size_t width = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& f = rows[r];
    if (r == 0 && !f.empty() && f[0] == "path") continue;
    if (f.size() < 2) fail(ErrorCode::format, "'{}' row {}: no rater scores", path.string(), r + 1);
    if (width == 0) width = f.size();
    if (f.size() != width) {
      fail(ErrorCode::format, "'{}' row {}: {} raters, earlier rows have {}", path.string(), r + 1,
           f.size() - 1, width - 1);
    }
    std::vector<int> scores;
    for (std::size_t i = 1; i < f.size(); ++i) scores.push_back(parse_number<int>(f[i], "rater score"));
    if (!out.emplace(f[0], std::move(scores)).second) {
      fail(ErrorCode::format, "'{}': '{}' rated twice", path.string(), f[0]);
    }
  }
  return out;
}

void apply_rater_scores(Manifest& manifest, const std::map<std::string, std::vector<int>>& raters) {
  for (auto& e : manifest.entries) {
    const auto it = raters.find(e.path);
    if (it == raters.end()) fail(ErrorCode::invalid_argument, "no rater scores for '{}'", e.path);
    e.score = aggregate_scores(it->second);
  }
}

Manifest split_by_patient(Manifest manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    fail(ErrorCode::invalid_argument, "train fraction {} outside (0, 1)", train_fraction);
  }
  std::set<std::string> unique;
  for (const auto& e : manifest.entries) unique.insert(e.patient_id);
  if (unique.size() < 2) {
    fail(ErrorCode::invalid_argument, "patient split needs at least 2 patients, found {}", unique.size());
  }
  std::vector<std::string> patients(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  // Fisher–Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::size_t i = patients.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(patients[i], patients[j]);
  }
  const auto n = static_cast<long long>(patients.size());
  const long long n_train =
      std::clamp(static_cast<long long>(std::floor(train_fraction * static_cast<double>(n) + 1e-9)), 1LL, n - 1);
  const std::set<std::string> train(patients.begin(), patients.begin() + n_train);
  for (auto& e : manifest.entries) e.split = train.count(e.patient_id) ? Split::train : Split::test;
  return manifest;
}

std::pair<std::string, std::string> parse_pristine_name(std::string_view stem) {
  const auto cut = stem.rfind('_');
  if (cut == std::string_view::npos || cut == 0 || cut + 1 == stem.size()) {
    fail(ErrorCode::format, "pristine image '{}' is not named {{patient}}_{{slice}}", stem);
  }
  return {std::string(stem.substr(0, cut)), std::string(stem.substr(cut + 1))};
}

Manifest build_dataset(const fs::path& pristine_dir, const fs::path& out_dir, const BuildOptions& options) {
  if (!fs::is_directory(pristine_dir)) fail(ErrorCode::io, "'{}' is not a directory", pristine_dir.string());
  std::vector<fs::path> sources;
  for (const auto& item : fs::directory_iterator(pristine_dir)) {
    if (!item.is_regular_file()) continue;
    std::string ext = item.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") sources.push_back(item.path());
  }
  if (sources.empty()) fail(ErrorCode::io, "no .png images in '{}'", pristine_dir.string());
  std::sort(sources.begin(), sources.end());

  struct Source {
    fs::path path;
    std::string patient, slice;
  };
  std::vector<Source> parsed;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& p : sources) {
    auto [patient, slice] = parse_pristine_name(p.stem().string());
    if (!seen.emplace(patient, slice).second) {
      fail(ErrorCode::format, "duplicate pristine image for patient '{}' slice '{}'", patient, slice);
    }
    parsed.push_back({p, std::move(patient), std::move(slice)});
  }

  const fs::path image_dir = out_dir / "images";
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create '{}': {}", image_dir.string(), ec.message());

  const auto recipes = all_recipes();
  Manifest manifest;
  manifest.root = out_dir;
  manifest.entries.resize(parsed.size() * recipes.size());

  // Each worker owns a disjoint, precomputed slot range of the entry table.
  auto generate = [&](std::size_t index) {
    const Source& src = parsed[index];
    const imaging::Image pristine = imaging::read_image(src.path);
    for (std::size_t r = 0; r < recipes.size(); ++r) {
      const auto& recipe = recipes[r];
      const std::uint64_t seed = image_seed(options.seed, src.patient, src.slice, recipe);
      const imaging::Image degraded = distort(pristine, recipe, seed, options.levels);
      const std::string name = fmt::format("{}_{}_{}.png", src.patient, src.slice, recipe.tag());
      imaging::write_png(image_dir / name, degraded);
      ManifestEntry& e = manifest.entries[index * recipes.size() + r];
      e.path = "images/" + name;
      e.patient_id = src.patient;
      e.slice_id = src.slice;
      e.recipe = recipe;
    }
  };

  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(options.workers, parsed.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < parsed.size(); ++i) generate(i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < parsed.size(); i += workers) generate(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::set<std::string> patients;
  for (const auto& s : parsed) patients.insert(s.patient);
  if (patients.size() >= 2) manifest = split_by_patient(std::move(manifest), options.train_fraction, options.seed);
  write_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace msiqa::dataset
