// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gates. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.
#include <array>
#include <chrono>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <string>

#include <fmt/core.h>

#include "msiqa/dataset.hpp"
#include "msiqa/fusion.hpp"
#include "msiqa/harness.hpp"
#include "msiqa/objectives.hpp"
#include "msiqa/ops.hpp"
#include "msiqa/regressor.hpp"
#include "support.hpp"

using namespace msiqa;
namespace oracle = testing::oracle;
using Clock = std::chrono::steady_clock;
using Vec = std::vector<double>;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Vec project_weights(std::mt19937_64& rng, Index n) { return testing::random_values(rng, n); }

fusion::AgcaParams random_agca(std::mt19937_64& rng, Index d) {
  return {testing::random_leaf(rng, {d, d}), testing::random_leaf(rng, {d}), testing::random_leaf(rng, {d, d})};
}

backbones::StageFeatures random_stages(std::mt19937_64& rng, Index batch, const backbones::StageChannels& channels,
                                       Index size) {
  backbones::StageFeatures out;
  for (std::size_t i = 0; i < 4; ++i) {
    const Index s = size >> i;
    out.stages[i] = testing::random_leaf(rng, {batch, channels[i], s, s});
  }
  return out;
}

Outcome gradient_suite() {
  const auto start = Clock::now();
  constexpr int kInstances = 20;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<Index> small(1, 4);
  double worst_module = 0, worst_loss = 0;

  for (int trial = 0; trial < kInstances; ++trial) {
    // agca_apply
    const Index d = small(rng) + 1, batch = small(rng);
    Var f_in = testing::random_leaf(rng, {batch, d});
    const auto block = random_agca(rng, d);
    const Vec wa = project_weights(rng, batch * d);
    worst_module = std::max(
        worst_module,
        testing::check_gradients([&] { return ops::dot_constant(fusion::agca_apply(f_in, block), wa); },
                                 {f_in, block.transform_weight, block.transform_bias, block.adjacency})
            .relative_error);

    // fuse
    backbones::StageChannels rc{}, wc{};
    for (std::size_t i = 0; i < 4; ++i) {
      rc[i] = small(rng);
      wc[i] = small(rng);
    }
    // Pooled widths must divide by the kernel.
    wc[3] = 2 * small(rng);
    fusion::FusionConfig fcfg{2 * small(rng), 2, 4, true};
    const auto params = fusion::init_fusion_params({rc, wc}, fcfg, 200 + static_cast<std::uint64_t>(trial));
    for (const auto& p : params.entries()) {
      if (p.name.ends_with("adjacency")) {
        Var v = p.var;
        const auto values = testing::random_values(rng, v.numel(), -0.5, 0.5);
        std::copy(values.begin(), values.end(), v.mutable_values().begin());
      }
    }
    const auto view = fusion::fusion_view(params, fcfg);
    const auto res = random_stages(rng, 2, rc, 8), win = random_stages(rng, 2, wc, 8);
    const auto widths = fusion::fused_widths({rc, wc}, fcfg);
    const Vec ww = project_weights(rng, 2 * widths.f_w), ws = project_weights(rng, 2 * widths.f_s);
    std::vector<Var> inputs = params.trainable_vars();
    for (std::size_t i = 0; i < 4; ++i) {
      inputs.push_back(res.stages[i]);
      inputs.push_back(win.stages[i]);
    }
    worst_module = std::max(worst_module, testing::check_gradients(
                                              [&] {
                                                const auto out = fusion::fuse(res, win, fcfg, view);
                                                return ops::add(ops::dot_constant(out.f_w, ww),
                                                                ops::dot_constant(out.f_s, ws));
                                              },
                                              inputs)
                                              .relative_error);

    // both regressor branches
    const Index w_in = small(rng) + 1, s_in = small(rng) + 1, hidden = small(rng) + 1;
    auto layer = [&](Index out, Index in) {
      return fusion::LinearParams{testing::random_leaf(rng, {out, in}), testing::random_leaf(rng, {out})};
    };
    regressor::RegressorParams rp{layer(hidden, s_in), layer(1, hidden), layer(hidden, w_in), layer(1, hidden)};
    Var f_w = testing::random_leaf(rng, {batch, w_in}), f_s = testing::random_leaf(rng, {batch, s_in});
    const Vec wr = project_weights(rng, batch);
    worst_module = std::max(
        worst_module,
        testing::check_gradients([&] { return ops::dot_constant(regressor::score_branch(f_s, rp, 0.01), wr); },
                                 {f_s, rp.score1.weight, rp.score1.bias, rp.score2.weight, rp.score2.bias})
            .relative_error);
    worst_module = std::max(
        worst_module,
        testing::check_gradients([&] { return ops::dot_constant(regressor::weight_branch(f_w, rp, 0.01), wr); },
                                 {f_w, rp.weight1.weight, rp.weight1.bias, rp.weight2.weight, rp.weight2.bias})
            .relative_error);

    // losses
    const Index n = small(rng) + 2;
    Var y = testing::random_leaf(rng, {n, 1});
    const Vec t = testing::random_values(rng, n, 0, 4);
    const objectives::LossConfig lcfg{2.0, 0.5, 0.5};
    for (const auto& loss : std::array<std::function<Var()>, 3>{
             [&] { return objectives::mse_loss(y, t); }, [&] { return objectives::ranking_loss(y, t, 2.0); },
             [&] { return objectives::total_loss(y, t, lcfg); }}) {
      worst_loss = std::max(worst_loss, testing::check_gradients(loss, {y}, 1e-5).relative_error);
    }
  }
  const double elapsed = seconds_since(start);
  return {worst_module < 1e-4 && worst_loss < 1e-6 && elapsed < 120,
          fmt::format("{} instances each, worst module error {:.2e}, worst loss error {:.2e}, {:.1f} s", kInstances,
                      worst_module, worst_loss, elapsed)};
}

Vec tied_or_random(std::mt19937_64& rng, std::size_t n, bool ties) {
  if (!ties) return testing::random_values(rng, static_cast<Index>(n));
  std::uniform_int_distribution<int> level(0, 3);
  Vec out(n);
  for (auto& v : out) v = level(rng) * 0.5;
  return out;
}

bool constant(const Vec& v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; }); }

Outcome metric_oracles() {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> length(2, 8);
  double worst = 0;
  int checked = 0, tied = 0;
  while (checked < 1000) {
    const std::size_t n = length(rng);
    const bool ties = checked % 2 == 0;
    const Vec y = tied_or_random(rng, n, ties), t = tied_or_random(rng, n, ties);
    if (constant(y) || constant(t)) continue;
    worst = std::max(worst, std::abs(objectives::srocc(y, t) - oracle::spearman(y, t)));
    worst = std::max(worst, std::abs(objectives::plcc(y, t) - oracle::pearson(y, t)));
    tied += std::set<double>(y.begin(), y.end()).size() < n;
    ++checked;
  }
  return {worst <= 1e-10, fmt::format("{} vectors ({} with ties), worst deviation {:.2e}", checked, tied, worst)};
}

Outcome loss_identities() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> shift(-10, 10);
  std::uniform_int_distribution<Index> length(2, 8);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Vec t = testing::random_values(rng, length(rng), 0, 4);
    const double c = shift(rng);
    Vec y = t;
    for (auto& v : y) v += c;
    worst = std::max(worst, std::abs(objectives::ranking_loss(y, t, 2.0)));
  }
  const double expected = std::pow(oracle::sigmoid(2.0) - oracle::sigmoid(-2.0), 2);
  const double pair = objectives::ranking_loss(Vec{0, 1}, Vec{1, 0}, 2.0);
  return {worst <= 1e-12 && std::abs(pair - expected) <= 1e-9,
          fmt::format("worst translated loss {:.2e}; two-image loss {:.12f} vs {:.12f}", worst, pair, expected)};
}

Outcome shape_contract() {
  using backbones::BackboneKind;
  using backbones::BackboneSpec;
  const fusion::FusionConfig full;
  const fusion::FusionInputs big{BackboneSpec::defaults(BackboneKind::residual50).stage_channels,
                                 BackboneSpec::defaults(BackboneKind::windowed_tiny).stage_channels};
  const auto widths = fusion::fused_widths(big, full);
  bool ok = big.fused_channels() == backbones::StageChannels{352, 704, 1408, 2816} && widths.f_w == 512 &&
            widths.f_s == 384;

  // Toy pair: residual (8, 16, 32, 64), windowed (4, 8, 16, 32), D = 8.
  const TrainConfig toy = TrainConfig::toy();
  const auto toy_inputs = toy.fusion_inputs();
  const auto toy_widths = fusion::fused_widths(toy_inputs, toy.fusion);
  ok = ok && toy_inputs.fused_channels() == backbones::StageChannels{12, 24, 48, 96} && toy_widths.f_w == 16 &&
       toy_widths.f_s == 16;

  // And through a real forward pass on both pairs.
  const Model toy_model(toy);
  const auto toy_out = toy_model.forward(Var::full({1, 3, 64, 64}, 0.5));
  ok = ok && toy_out.fused.f_w.shape() == Shape{1, 16} && toy_out.fused.f_s.shape() == Shape{1, 16};
  for (std::size_t i = 0; i < 4; ++i) {
    const Index side = 64 >> (i + 2);
    ok = ok && toy_out.fused.fused_stages[i].shape() == Shape{1, toy_inputs.fused_channels()[i], side, side};
  }
  TrainConfig big_cfg;
  big_cfg.freeze_backbones = true;
  const Model big_model(big_cfg);
  const auto big_out = big_model.forward(Var::full({1, 3, 224, 224}, 0.5));
  ok = ok && big_out.fused.f_w.shape() == Shape{1, 512} && big_out.fused.f_s.shape() == Shape{1, 384};
  const Index big_channels[] = {352, 704, 1408, 2816};
  for (std::size_t i = 0; i < 4; ++i) {
    const Index side = 56 >> i;
    ok = ok && big_out.fused.fused_stages[i].shape() == Shape{1, big_channels[i], side, side};
  }
  return {ok, fmt::format("full f_w {} f_s {}, toy f_w {} f_s {}", widths.f_w, widths.f_s, toy_widths.f_w,
                          toy_widths.f_s)};
}

Outcome agca_semantics() {
  std::mt19937_64 rng(505);
  double worst = 0;
  bool exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Index d = 2 + trial % 7, batch = 1 + trial % 3;
    auto block = random_agca(rng, d);
    const Vec f_in_values = testing::random_values(rng, batch * d, -2, 2);
    const Var f_in = Var::constant({batch, d}, f_in_values);

    // A2 = 0: f ⊙ f_in, with f from a plain loop.
    fusion::AgcaParams no_graph{block.transform_weight, block.transform_bias, Var::zeros({d, d})};
    const Var out = fusion::agca_apply(f_in, no_graph);
    const auto w = block.transform_weight.values(), b = block.transform_bias.values();
    for (Index r = 0; r < batch; ++r) {
      for (Index i = 0; i < d; ++i) {
        double z = b[i];
        for (Index j = 0; j < d; ++j) z += w[i * d + j] * f_in_values[r * d + j];
        const double expected = oracle::sigmoid(z) * f_in_values[r * d + i];
        worst = std::max(worst, std::abs(out.values()[r * d + i] - expected));
      }
    }

    // A = diag(f) + A2 for the descriptor transform f.
    const Var single = Var::constant({d}, Vec(f_in_values.begin(), f_in_values.begin() + d));
    const Var f = ops::sigmoid(ops::linear(single, block.transform_weight, block.transform_bias));
    const Var a = fusion::agca_attention_matrix(single, block);
    const auto a2 = block.adjacency.values();
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j < d; ++j) {
        const double expected = (i == j ? f.values()[i] : 0.0) + a2[i * d + j];
        exact = exact && a.values()[i * d + j] == expected;
      }
    }
  }
  return {worst <= 1e-12 && exact,
          fmt::format("50 blocks, worst f*f_in deviation {:.2e}, attention matrix {}", worst,
                      exact ? "exact" : "differs")};
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome dataset_factory() {
  testing::ScratchDir dir("acceptance_dataset");
  testing::write_pristine_set(dir / "pristine", 2, 2, 64);
  dataset::BuildOptions options;
  options.seed = 9;
  const auto manifest = dataset::build_dataset(dir / "pristine", dir / "a", options);
  const bool count_ok = manifest.entries.size() == 108;

  // Each family alone, averaged over 10 phantoms.
  constexpr int kImages = 10;
  std::array<std::array<double, 3>, 3> mean_psnr{};
  for (int k = 0; k < kImages; ++k) {
    const auto image = testing::phantom(64, 1000 + static_cast<std::uint64_t>(k));
    for (int level = 1; level <= 3; ++level) {
      const auto seed = static_cast<std::uint64_t>(k * 10 + level);
      mean_psnr[0][level - 1] += imaging::psnr(dataset::apply_poisson(image, level, seed), image) / kImages;
      mean_psnr[1][level - 1] += imaging::psnr(dataset::apply_gaussian(image, level, seed), image) / kImages;
      mean_psnr[2][level - 1] += imaging::psnr(dataset::apply_jpeg(image, level), image) / kImages;
    }
  }
  bool psnr_ok = true;
  for (const auto& family : mean_psnr) psnr_ok = psnr_ok && family[0] > family[1] && family[1] > family[2];

  std::set<std::string> train_patients, test_patients;
  for (const auto& e : manifest.entries) {
    (e.split == dataset::Split::train ? train_patients : test_patients).insert(e.patient_id);
  }
  std::vector<std::string> shared;
  std::set_intersection(train_patients.begin(), train_patients.end(), test_patients.begin(), test_patients.end(),
                        std::back_inserter(shared));
  const bool split_ok = shared.empty() && !train_patients.empty() && !test_patients.empty();

  dataset::build_dataset(dir / "pristine", dir / "b", options);
  bool identical = file_bytes(dir / "a" / "manifest.csv") == file_bytes(dir / "b" / "manifest.csv");
  for (const auto& e : manifest.entries) {
    identical = identical && file_bytes(dir / "a" / e.path) == file_bytes(dir / "b" / e.path);
  }
  return {count_ok && psnr_ok && split_ok && identical,
          fmt::format("{} entries; PSNR dB poisson {:.2f}/{:.2f}/{:.2f} gaussian {:.2f}/{:.2f}/{:.2f} jpeg "
                      "{:.2f}/{:.2f}/{:.2f}; {} shared patients; rebuild {}",
                      manifest.entries.size(), mean_psnr[0][0], mean_psnr[0][1], mean_psnr[0][2], mean_psnr[1][0],
                      mean_psnr[1][1], mean_psnr[1][2], mean_psnr[2][0], mean_psnr[2][1], mean_psnr[2][2],
                      shared.size(), identical ? "bit-identical" : "differs")};
}

Outcome overfit() {
  testing::ScratchDir dir("acceptance_overfit");
  testing::write_pristine_set(dir / "pristine", 2, 2, 64);
  const auto full = harness::synth_labels(dataset::build_dataset(dir / "pristine", dir / "data", {}),
                                          harness::LabelMode::recipe);
  std::mt19937_64 rng(1);
  std::vector<std::size_t> order(full.entries.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  dataset::Manifest subset;
  subset.root = full.root;
  for (std::size_t i = 0; i < 32; ++i) {
    auto e = full.entries[order[i]];
    e.split = dataset::Split::train;
    subset.entries.push_back(e);
  }

  TrainConfig cfg = TrainConfig::toy();
  cfg.max_steps = 500;
  cfg.epochs = 1000;
  cfg.eval_each_epoch = false;
  Model model(cfg);
  const auto start = Clock::now();
  const auto log = harness::train(model, subset, {});
  const auto report = harness::evaluate(model, subset, dataset::Split::train);
  const double elapsed = seconds_since(start);
  const double ratio = log.initial_loss / log.final_loss;
  return {log.steps == 500 && report.srocc >= 0.95 && ratio >= 10 && elapsed < 300,
          fmt::format("{} steps, loss {:.4f} -> {:.5f} ({:.0f}x), train SROCC {:.4f}, {:.1f} s", log.steps,
                      log.initial_loss, log.final_loss, ratio, report.srocc, elapsed)};
}

struct AblationRow {
  const char* name;
  std::function<void(TrainConfig&)> apply;
  Index f_w, f_s;
  backbones::StageChannels fused;
};

Outcome ablation_structure() {
  // Toy widths: residual (8, 16, 32, 64), windowed (4, 8, 16, 32), D = 8, pool 2.
  const std::vector<AblationRow> rows = {
      {"full", [](TrainConfig&) {}, 16, 16, {12, 24, 48, 96}},
      {"no SRM weight", [](TrainConfig& c) { c.regressor.use_weight_branch = false; }, 16, 16, {12, 24, 48, 96}},
      {"no MSFFM", [](TrainConfig& c) { c.fusion.use_attention = false; }, 48, 16, {12, 24, 48, 96}},
      {"no STM", [](TrainConfig& c) { c.use_stm = false; }, 16, 32, {8, 16, 32, 64}},
      {"no RM", [](TrainConfig& c) { c.use_rm = false; }, 16, 16, {4, 8, 16, 32}},
      {"stages 1-3", [](TrainConfig& c) { c.fusion.stage_count = 3; }, 12, 16, {12, 24, 48, 96}},
      {"stages 1-2", [](TrainConfig& c) { c.fusion.stage_count = 2; }, 8, 16, {12, 24, 48, 96}},
      {"stage 1", [](TrainConfig& c) { c.fusion.stage_count = 1; }, 4, 16, {12, 24, 48, 96}},
  };
  std::mt19937_64 rng(808);
  const Var images = Var::constant({2, 3, 64, 64}, testing::random_values(rng, 2 * 3 * 64 * 64, 0, 1));
  std::vector<std::string> failed;
  for (const auto& row : rows) {
    TrainConfig cfg = TrainConfig::toy();
    row.apply(cfg);
    bool ok = true;
    try {
      cfg.validate();
      const Model model(cfg);
      const auto out = model.forward(images);
      ok = out.fused.f_w.shape() == Shape{2, row.f_w} && out.fused.f_s.shape() == Shape{2, row.f_s} &&
           out.prediction.score.shape() == Shape{2, 1};
      for (std::size_t i = 0; i < 4; ++i) ok = ok && out.fused.fused_stages[i].dim(1) == row.fused[i];
      bool has_weight = false, has_fusion = false, has_windowed = false, has_residual = false;
      for (const auto& p : model.parameters().entries()) {
        has_weight |= p.name.starts_with("regressor.weight.");
        has_fusion |= p.name.starts_with("fusion.") || p.name.starts_with("agca.");
        has_windowed |= p.name.starts_with("backbone.windowed.");
        has_residual |= p.name.starts_with("backbone.residual.");
      }
      ok = ok && has_weight == cfg.regressor.use_weight_branch && has_fusion == cfg.fusion.use_attention &&
           has_windowed == cfg.use_stm && has_residual == cfg.use_rm;
      if (!cfg.regressor.use_weight_branch) {
        // The prediction is the score branch, value for value.
        ok = ok && !out.prediction.w.defined();
        for (Index i = 0; i < 2; ++i) ok = ok && out.prediction.score.values()[i] == out.prediction.s.values()[i];
      } else {
        for (Index i = 0; i < 2; ++i) {
          ok = ok && out.prediction.score.values()[i] == out.prediction.s.values()[i] * out.prediction.w.values()[i];
        }
      }
    } catch (const std::exception& e) {
      ok = false;
      std::fprintf(stderr, "ablation %s: %s\n", row.name, e.what());
    }
    if (!ok) failed.push_back(row.name);
  }
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
  return {failed.empty(), failed.empty() ? fmt::format("{} configurations built and shape-checked", rows.size())
                                         : "failed: " + names};
}

bool same_report(const harness::EvalReport& a, const harness::EvalReport& b) {
  if (a.split != b.split || a.n_images != b.n_images || a.rows.size() != b.rows.size()) return false;
  if (std::memcmp(&a.srocc, &b.srocc, sizeof(double)) != 0 || std::memcmp(&a.plcc, &b.plcc, sizeof(double)) != 0) {
    return false;
  }
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    if (x.path != y.path || std::memcmp(&x.target, &y.target, sizeof(double)) != 0 ||
        std::memcmp(&x.prediction, &y.prediction, sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

Outcome determinism() {
  testing::ScratchDir dir("acceptance_determinism");
  testing::write_pristine_set(dir / "pristine", 2, 1, 64);
  dataset::BuildOptions options;
  options.seed = 4;
  const auto manifest = harness::synth_labels(dataset::build_dataset(dir / "pristine", dir / "data", options),
                                              harness::LabelMode::recipe);
  TrainConfig cfg = TrainConfig::toy();
  cfg.seed = 17;
  cfg.epochs = 2;
  cfg.eval_each_epoch = false;
  Model first(cfg), second(cfg);
  const double a = harness::train(first, manifest, {}).final_loss;
  const double b = harness::train(second, manifest, {}).final_loss;

  first.save(dir / "model.safetensors");
  const Model restored = Model::load(dir / "model.safetensors");
  const auto before = harness::evaluate(first, manifest, dataset::Split::test);
  const auto after = harness::evaluate(restored, manifest, dataset::Split::test);
  const bool identical = same_report(before, after);
  return {std::abs(a - b) <= 1e-9 && identical,
          fmt::format("final losses {:.17g} and {:.17g}; reloaded report {}", a, b,
                      identical ? "bit-identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradients match central differences", gradient_suite},
      {"correlation metrics match brute-force oracles", metric_oracles},
      {"ranking loss identities", loss_identities},
      {"fused widths", shape_contract},
      {"graph channel attention semantics", agca_semantics},
      {"dataset factory", dataset_factory},
      {"overfit smoke test", overfit},
      {"ablation configurations", ablation_structure},
      {"end-to-end determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    failures += !outcome.pass;
    std::printf("%s criterion %zu (%s): %s\n", outcome.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                outcome.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
