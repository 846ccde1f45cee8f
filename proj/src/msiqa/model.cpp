// SPDX-License-Identifier: Apache-2.0
#include "msiqa/model.hpp"

#include "msiqa/errors.hpp"
#include "msiqa/safetensors.hpp"

namespace msiqa {

namespace {

constexpr std::string_view kModelFormat = "msiqa-model-v1";
constexpr std::string_view kResidualPrefix = "backbone.residual.";
constexpr std::string_view kWindowedPrefix = "backbone.windowed.";

// Independent streams for each module from one user seed.
std::uint64_t module_seed(std::uint64_t seed, std::uint64_t module) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (module + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

ParameterSet backbone_params(const backbones::BackboneSpec& spec, std::uint64_t seed, bool from_file,
                             std::vector<std::string>& notes) {
  if (!from_file || !spec.checkpoint_path) return backbones::init_backbone_params(spec, seed);
  auto loaded = backbones::load_backbone_weights(spec, *spec.checkpoint_path);
  const std::string source = spec.checkpoint_path->string();
  for (const auto& name : loaded.report.missing) {
    notes.push_back(fmt::format("{}: missing tensor '{}' keeps its initial value", source, name));
  }
  for (const auto& name : loaded.report.extra) notes.push_back(fmt::format("{}: unused tensor '{}'", source, name));
  return std::move(loaded.params);
}

}  // namespace

Model::Model(TrainConfig cfg) : Model(std::move(cfg), true) {}

Model::Model(TrainConfig cfg, bool initialize_backbones_from_files) : cfg_(std::move(cfg)) {
  cfg_.validate();
  residual_ = cfg_.residual_spec();
  windowed_ = cfg_.windowed_spec();
  if (residual_) {
    residual_params_ = backbone_params(*residual_, module_seed(cfg_.seed, 0), initialize_backbones_from_files, notes_);
    params_.merge(residual_params_, kResidualPrefix);
  }
  if (windowed_) {
    windowed_params_ = backbone_params(*windowed_, module_seed(cfg_.seed, 1), initialize_backbones_from_files, notes_);
    params_.merge(windowed_params_, kWindowedPrefix);
  }
  const auto inputs = cfg_.fusion_inputs();
  params_.merge(fusion::init_fusion_params(inputs, cfg_.fusion, module_seed(cfg_.seed, 2)), "");
  const auto widths = fusion::fused_widths(inputs, cfg_.fusion);
  params_.merge(regressor::init_regressor_params(widths.f_w, widths.f_s, cfg_.regressor, module_seed(cfg_.seed, 3)),
                "");
  if (cfg_.freeze_backbones) {
    residual_params_.set_requires_grad(false);
    windowed_params_.set_requires_grad(false);
  }
}

Model Model::load(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  const auto format = file.metadata.find("format");
  const auto config = file.metadata.find("config");
  if (format == file.metadata.end() || format->second != kModelFormat || config == file.metadata.end()) {
    fail(ErrorCode::format, "'{}' is not a model checkpoint", path.string());
  }
  Model model(parse_config(config->second), false);
  const LoadReport report = load_into(model.params_, file);
  if (!report.missing.empty() || !report.extra.empty()) {
    fail(ErrorCode::parameter_mismatch, "'{}' does not match its own configuration ({} missing, {} extra, e.g. '{}')",
         path.string(), report.missing.size(), report.extra.size(),
         report.missing.empty() ? report.extra.front() : report.missing.front());
  }
  return model;
}

void Model::save(const std::filesystem::path& path) const {
  TrainConfig snapshot = cfg_;
  // Backbone weights travel inside the checkpoint itself.
  snapshot.residual_checkpoint.clear();
  snapshot.windowed_checkpoint.clear();
  TensorFile file = to_tensor_file(params_);
  file.metadata["format"] = std::string(kModelFormat);
  file.metadata["config"] = format_config(snapshot);
  write_tensor_file(path, file);
}

std::vector<Var> Model::trainable() const {
  std::vector<Var> out;
  for (const auto& p : params_.entries()) {
    if (!p.trainable) continue;
    const bool backbone = p.name.starts_with("backbone.");
    if (backbone && cfg_.freeze_backbones) continue;
    out.push_back(p.var);
  }
  return out;
}

ModelOutput Model::forward(const Var& images, bool training) const {
  const Index r = cfg_.input_resolution;
  if (images.rank() != 4 || images.dim(2) != r || images.dim(3) != r) {
    fail(ErrorCode::shape_mismatch, "model expects (N, 3, {0}, {0}) input, got {1}", r, to_string(images.shape()));
  }
  const bool backbone_training = training && !cfg_.freeze_backbones;
  ModelOutput out;
  if (residual_) out.residual = backbones::extract_stages(images, *residual_, residual_params_, backbone_training);
  if (windowed_) out.windowed = backbones::extract_stages(images, *windowed_, windowed_params_, backbone_training);
  const auto fusion_params = fusion::fusion_view(params_, cfg_.fusion);
  out.fused = fusion::fuse(out.residual ? &*out.residual : nullptr, out.windowed ? &*out.windowed : nullptr,
                           cfg_.fusion, fusion_params);
  out.prediction = regressor::predict(out.fused.f_w, out.fused.f_s, regressor::regressor_view(params_, cfg_.regressor),
                                      cfg_.regressor);
  return out;
}

std::vector<double> Model::score(const Var& images) const {
  NoGradGuard no_grad;
  const auto out = forward(images, false);
  const auto values = out.prediction.score.values();
  return {values.begin(), values.end()};
}

imaging::Image Model::prepare(const imaging::Image& image) const {
  const Index r = cfg_.input_resolution;
  return imaging::resize(imaging::to_rgb(image), r, r);
}

imaging::Image Model::ingest(const std::filesystem::path& path) const { return prepare(imaging::read_image(path)); }

}  // namespace msiqa
