// SPDX-License-Identifier: Apache-2.0
#include "msiqa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <thread>

#include "msiqa/errors.hpp"
#include "msiqa/objectives.hpp"
#include "msiqa/ops.hpp"

namespace msiqa::harness {

using msiqa::to_string;

namespace fs = std::filesystem;
using dataset::Manifest;
using dataset::ManifestEntry;

namespace {

constexpr std::size_t kCacheBudgetBytes = std::size_t{512} << 20;

// Prepared (RGB, resized) images of a fixed entry list, kept in memory when
// they fit the cache budget and re-read from disk otherwise.
class ImageStore {
 public:
  ImageStore(const Model& model, const Manifest& manifest, const std::vector<const ManifestEntry*>& entries)
      : model_(model) {
    for (const auto* e : entries) paths_.push_back(manifest.resolve(*e));
    const Index r = model.config().input_resolution;
    const std::size_t bytes = paths_.size() * static_cast<std::size_t>(3 * r * r) * sizeof(double);
    if (bytes <= kCacheBudgetBytes) {
      for (const auto& p : paths_) cache_.push_back(model.ingest(p));
    }
  }

  std::size_t size() const { return paths_.size(); }

  Var batch(const std::vector<std::size_t>& indices) const {
    std::vector<imaging::Image> images;
    images.reserve(indices.size());
    for (std::size_t i : indices) images.push_back(cache_.empty() ? model_.ingest(paths_[i]) : cache_[i]);
    return imaging::to_batch(images);
  }

 private:
  const Model& model_;
  std::vector<fs::path> paths_;
  std::vector<imaging::Image> cache_;
};

std::vector<double> labelled_targets(const std::vector<const ManifestEntry*>& entries, std::string_view what) {
  std::vector<double> t;
  t.reserve(entries.size());
  for (const auto* e : entries) {
    if (!e->score) fail(ErrorCode::invalid_argument, "{}: '{}' has no score", what, e->path);
    t.push_back(*e->score);
  }
  return t;
}

// Scores of every stored image, evaluation mode, in chunks of `chunk`.
std::vector<double> predict_all(const Model& model, const ImageStore& store, Index chunk) {
  std::vector<double> out;
  out.reserve(store.size());
  for (std::size_t begin = 0; begin < store.size(); begin += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(store.size(), begin + static_cast<std::size_t>(chunk));
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto scores = model.score(store.batch(idx));
    out.insert(out.end(), scores.begin(), scores.end());
  }
  return out;
}

// Minibatches over a permutation; a trailing singleton joins the previous
// batch so the ranking term always sees a pair.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, Index batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

void shuffle(std::vector<std::size_t>& order, std::mt19937_64& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

std::string undefined_metric_diagnostic(std::span<const double> predictions, std::span<const double> targets) {
  const auto [lo, hi] = std::minmax_element(predictions.begin(), predictions.end());
  const auto [tlo, thi] = std::minmax_element(targets.begin(), targets.end());
  if (*lo == *hi) {
    return fmt::format("correlation undefined: all {} predictions equal {}", predictions.size(), *lo);
  }
  if (*tlo == *thi) return fmt::format("correlation undefined: all {} targets equal {}", targets.size(), *tlo);
  return "correlation undefined";
}

// Normalizes to [0, 1]; a constant map becomes all zeros.
void normalize(std::vector<double>& values) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double low = *lo, span = *hi - *lo;
  for (double& v : values) v = span > 0 ? (v - low) / span : 0.0;
}

}  // namespace

Adam::Adam(std::vector<Var> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var p = params_[k];
    const auto g = p.grad();
    if (g.empty()) continue;
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double dataset_loss(const Model& model, const Manifest& manifest, const std::vector<const ManifestEntry*>& entries) {
  const ImageStore store(model, manifest, entries);
  const auto targets = labelled_targets(entries, "loss");
  const auto predictions = predict_all(model, store, model.config().batch_size);
  return objectives::total_loss(predictions, targets, model.config().loss);
}

TrainLog train(Model& model, const Manifest& manifest, const LogSink& log) {
  const TrainConfig& cfg = model.config();
  const auto entries = manifest.select(dataset::Split::train);
  if (entries.empty()) fail(ErrorCode::invalid_argument, "the manifest has no train entries");
  const auto targets = labelled_targets(entries, "train");
  if (entries.size() < 2 && cfg.loss.lambda2 != 0.0) {
    fail(ErrorCode::invalid_argument, "the ranking term needs at least two train images");
  }
  const bool can_evaluate = cfg.eval_each_epoch && manifest.select(cfg.eval_split).size() >= 2;
  auto emit = [&](const std::string& line) {
    if (log) log(line);
  };

  const ImageStore store(model, manifest, entries);
  TrainLog out;
  out.initial_loss = objectives::total_loss(predict_all(model, store, cfg.batch_size), targets, cfg.loss);
  emit(fmt::format("initial train loss {:.6g} over {} images", out.initial_loss, entries.size()));

  Adam optimizer(model.trainable(), cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);

  bool done = false;
  for (Index epoch = 1; epoch <= cfg.epochs && !done; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    Index epoch_steps = 0;
    for (const auto& batch : make_batches(order, cfg.batch_size)) {
      model.parameters().zero_grad();
      std::vector<double> t;
      for (std::size_t i : batch) t.push_back(targets[i]);
      const ModelOutput result = model.forward(store.batch(batch), true);
      const Var loss = objectives::total_loss(result.prediction.score, t, cfg.loss);
      loss.backward();
      optimizer.step();
      out.step_losses.push_back(loss.item());
      epoch_loss += loss.item();
      ++epoch_steps;
      ++out.steps;
      if (cfg.max_steps > 0 && out.steps >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    EpochRecord record;
    record.epoch = epoch;
    record.steps = out.steps;
    record.mean_batch_loss = epoch_loss / static_cast<double>(epoch_steps);
    if (can_evaluate) {
      try {
        const EvalReport report = evaluate(model, manifest, cfg.eval_split);
        record.eval_srocc = report.srocc;
        record.eval_plcc = report.plcc;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::undefined_metric) throw;
        record.eval_note = e.what();
      }
    }
    std::string line = fmt::format("epoch {} step {} loss {:.6g}", record.epoch, record.steps, record.mean_batch_loss);
    if (record.eval_srocc) {
      line += fmt::format(" {} srocc {:.4f} plcc {:.4f}", dataset::to_string(cfg.eval_split), *record.eval_srocc,
                          *record.eval_plcc);
    } else if (!record.eval_note.empty()) {
      line += " (" + record.eval_note + ")";
    }
    emit(line);
    out.epochs.push_back(std::move(record));
  }
  model.parameters().zero_grad();
  out.final_loss = objectives::total_loss(predict_all(model, store, cfg.batch_size), targets, cfg.loss);
  emit(fmt::format("final train loss {:.6g} after {} steps", out.final_loss, out.steps));
  return out;
}

double score_prepared(const Model& model, const imaging::Image& prepared) {
  return model.score(imaging::to_batch({prepared})).front();
}

double score_image(const Model& model, const fs::path& image_path) {
  return score_prepared(model, model.ingest(image_path));
}

EvalReport evaluate(const Model& model, const Manifest& manifest, dataset::Split split, Oracle oracle) {
  const auto entries = manifest.select(split);
  if (entries.empty()) fail(ErrorCode::invalid_argument, "the {} split is empty", dataset::to_string(split));
  const auto targets = labelled_targets(entries, "evaluate");
  for (const auto* e : entries) {
    const fs::path p = manifest.resolve(*e);
    if (!fs::is_regular_file(p)) fail(ErrorCode::io, "image '{}' does not exist", p.string());
  }

  std::vector<double> predictions(entries.size());
  if (oracle != Oracle::none) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      predictions[i] = oracle == Oracle::truth ? targets[i] : -targets[i];
    }
  } else {
    const TrainConfig& cfg = model.config();
    const std::size_t workers = std::clamp<std::size_t>(
        cfg.deterministic ? 1 : static_cast<std::size_t>(cfg.workers), 1, entries.size());
    auto run = [&](std::size_t first) {
      for (std::size_t i = first; i < entries.size(); i += workers) {
        predictions[i] = score_image(model, manifest.resolve(*entries[i]));
      }
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::exception_ptr> errors(workers);
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            run(w);
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
  }

  EvalReport report;
  report.split = split;
  report.n_images = static_cast<Index>(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) report.rows.push_back({entries[i]->path, targets[i], predictions[i]});
  try {
    report.srocc = objectives::srocc(predictions, targets);
    report.plcc = objectives::plcc(predictions, targets);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::undefined_metric) throw;
    fail(ErrorCode::undefined_metric, "{} split: {}", dataset::to_string(split),
         undefined_metric_diagnostic(predictions, targets));
  }
  return report;
}

std::string EvalReport::table() const {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.path.size());
  std::string out = fmt::format("{:<{}}  {:>10}  {:>12}\n", "path", width, "target", "prediction");
  for (const auto& r : rows) out += fmt::format("{:<{}}  {:>10.4f}  {:>12.6f}\n", r.path, width, r.target, r.prediction);
  out += fmt::format("\nsplit {}  images {}  SROCC {:.4f}  PLCC {:.4f}\n", dataset::to_string(split), n_images, srocc,
                     plcc);
  return out;
}

std::string EvalReport::predictions_csv() const {
  std::string out = "path,target,prediction\n";
  for (const auto& r : rows) {
    const bool quote = r.path.find_first_of(",\"\n") != std::string::npos;
    std::string path = r.path;
    if (quote) {
      std::string escaped;
      for (char c : path) escaped += c == '"' ? std::string("\"\"") : std::string(1, c);
      path = "\"" + escaped + "\"";
    }
    out += fmt::format("{},{},{}\n", path, r.target, r.prediction);
  }
  return out;
}

std::string EvalReport::metrics_csv() const {
  return fmt::format("split,n_images,srocc,plcc\n{},{},{},{}\n", dataset::to_string(split), n_images, srocc, plcc);
}

std::vector<fs::path> export_feature_maps(const Model& model, const fs::path& image_path, const fs::path& out_dir) {
  const imaging::Image input = model.ingest(image_path);
  ModelOutput out;
  {
    NoGradGuard no_grad;
    out = model.forward(imaging::to_batch({input}), false);
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::io, "cannot create '{}': {}", out_dir.string(), ec.message());

  std::vector<fs::path> written;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var& stage = out.fused.fused_stages[i];
    const Index c = stage.dim(1), h = stage.dim(2), w = stage.dim(3);
    imaging::Image mean = imaging::Image::blank(1, h, w);
    const auto v = stage.values();
    for (Index ch = 0; ch < c; ++ch) {
      for (Index p = 0; p < h * w; ++p) mean.pixels[static_cast<std::size_t>(p)] += v[static_cast<std::size_t>(ch * h * w + p)];
    }
    for (double& x : mean.pixels) x /= static_cast<double>(c);
    normalize(mean.pixels);
    const imaging::Image heat = imaging::heat_colormap(imaging::resize(mean, input.height, input.width));
    written.push_back(out_dir / fmt::format("F{}.png", i + 1));
    imaging::write_png(written.back(), heat);
  }
  const std::pair<const char*, const Var*> strips[] = {{"FW.png", &out.fused.feature_w}, {"FS.png", &out.fused.feature_s}};
  for (const auto& [name, var] : strips) {
    constexpr Index kStripHeight = 16;
    std::vector<double> values(var->values().begin(), var->values().end());
    normalize(values);
    const Index n = static_cast<Index>(values.size());
    imaging::Image strip = imaging::Image::blank(1, kStripHeight, n);
    for (Index y = 0; y < kStripHeight; ++y) {
      std::copy(values.begin(), values.end(), strip.pixels.begin() + y * n);
    }
    written.push_back(out_dir / name);
    imaging::write_png(written.back(), imaging::heat_colormap(strip));
  }
  return written;
}

LabelMode parse_label_mode(std::string_view text) {
  if (text == "recipe") return LabelMode::recipe;
  if (text == "psnr") return LabelMode::psnr;
  fail(ErrorCode::invalid_argument, "unknown label mode '{}' (expected recipe or psnr)", text);
}

double recipe_label(const dataset::DistortionRecipe& recipe) {
  recipe.validate();
  return 4.0 - static_cast<double>(recipe.poisson + recipe.gaussian + recipe.jpeg - 3) / 6.0 * 4.0;
}

Manifest synth_labels(Manifest manifest, LabelMode mode, const std::optional<fs::path>& pristine_dir) {
  if (mode == LabelMode::recipe) {
    for (auto& e : manifest.entries) e.score = recipe_label(e.recipe);
    return manifest;
  }
  if (!pristine_dir) fail(ErrorCode::invalid_argument, "psnr labels need the pristine image directory");
  if (manifest.entries.empty()) return manifest;
  constexpr double kPsnrCap = 100.0;  // identical rasters
  std::vector<double> psnrs;
  std::map<std::pair<std::string, std::string>, imaging::Image> pristine;
  for (const auto& e : manifest.entries) {
    const auto key = std::make_pair(e.patient_id, e.slice_id);
    auto it = pristine.find(key);
    if (it == pristine.end()) {
      const fs::path ref = *pristine_dir / fmt::format("{}_{}.png", e.patient_id, e.slice_id);
      if (!fs::is_regular_file(ref)) {
        fail(ErrorCode::io, "missing pristine reference '{}' for '{}'", ref.string(), e.path);
      }
      it = pristine.emplace(key, imaging::read_image(ref)).first;
    }
    const double p = imaging::psnr(imaging::read_image(manifest.resolve(e)), it->second);
    psnrs.push_back(std::min(p, kPsnrCap));
  }
  const auto [lo, hi] = std::minmax_element(psnrs.begin(), psnrs.end());
  const double low = *lo, span = *hi - *lo;
  for (std::size_t i = 0; i < psnrs.size(); ++i) {
    manifest.entries[i].score = span > 0 ? 4.0 * (psnrs[i] - low) / span : 2.0;
  }
  return manifest;
}

}  // namespace msiqa::harness
