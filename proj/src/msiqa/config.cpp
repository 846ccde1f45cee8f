// SPDX-License-Identifier: Apache-2.0
#include "msiqa/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "msiqa/errors.hpp"

namespace msiqa {

namespace {

using backbones::BackboneKind;

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    fail(ErrorCode::invalid_argument, "{}: '{}' is not a valid number", key, text);
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string v = lower(text);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorCode::invalid_argument, "{}: '{}' is not a boolean", key, text);
}

std::vector<std::string_view> split_list(std::string_view text) {
  std::vector<std::string_view> parts;
  while (true) {
    const auto cut = text.find(',');
    parts.push_back(trim(text.substr(0, cut)));
    if (cut == std::string_view::npos) break;
    text.remove_prefix(cut + 1);
  }
  return parts;
}

backbones::StageChannels parse_channels(std::string_view key, std::string_view text) {
  if (lower(text) == "default" || text.empty()) return {};
  const auto parts = split_list(text);
  if (parts.size() != 4) fail(ErrorCode::invalid_argument, "{}: expected 4 comma-separated widths", key);
  backbones::StageChannels out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = parse_number<Index>(key, parts[i]);
    if (out[i] <= 0) fail(ErrorCode::invalid_argument, "{}: widths must be positive", key);
  }
  return out;
}

std::string format_channels(const backbones::StageChannels& c) {
  if (c == backbones::StageChannels{}) return "default";
  return fmt::format("{},{},{},{}", c[0], c[1], c[2], c[3]);
}

int parse_stages(std::string_view key, std::string_view text) {
  const auto parts = split_list(text);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parse_number<int>(key, parts[i]) != static_cast<int>(i + 1)) {
      fail(ErrorCode::invalid_argument, "{}: stages must be contiguous from 1 (e.g. 1,2,3), got '{}'", key, text);
    }
  }
  if (parts.size() > 4) fail(ErrorCode::invalid_argument, "{}: at most 4 stages", key);
  return static_cast<int>(parts.size());
}

std::string format_stages(int count) {
  std::string out;
  for (int i = 1; i <= count; ++i) out += (i > 1 ? "," : "") + std::to_string(i);
  return out;
}

BackboneKind parse_kind(std::string_view key, std::string_view text, bool windowed) {
  BackboneKind kind;
  try {
    kind = backbones::parse_backbone_kind(text);
  } catch (const Error&) {
    fail(ErrorCode::invalid_argument, "{}: unknown backbone '{}'", key, text);
  }
  if (backbones::is_windowed(kind) != windowed) {
    fail(ErrorCode::invalid_argument, "{}: '{}' belongs to the other backbone family", key, text);
  }
  return kind;
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

struct KeySpec {
  const char* name;
  const char* help;
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define MSIQA_NUMBER_KEY(key, field, type, help)                                               \
  KeySpec {                                                                                    \
    key, help, [](TrainConfig& c, std::string_view v) { c.field = parse_number<type>(key, v); }, \
        [](const TrainConfig& c) { return fmt::format("{}", c.field); }                        \
  }
#define MSIQA_BOOL_KEY(key, field, help)                                                 \
  KeySpec {                                                                              \
    key, help, [](TrainConfig& c, std::string_view v) { c.field = parse_bool(key, v); }, \
        [](const TrainConfig& c) { return format_bool(c.field); }                        \
  }
#define MSIQA_TEXT_KEY(key, field, help)                                           \
  KeySpec {                                                                        \
    key, help, [](TrainConfig& c, std::string_view v) { c.field = std::string(v); }, \
        [](const TrainConfig& c) { return c.field; }                               \
  }

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      MSIQA_NUMBER_KEY("learning_rate", learning_rate, double, "Adam step size"),
      MSIQA_NUMBER_KEY("batch_size", batch_size, Index, "images per optimization step"),
      MSIQA_NUMBER_KEY("epochs", epochs, Index, "passes over the train split"),
      MSIQA_NUMBER_KEY("max_steps", max_steps, Index, "stop after this many steps; 0 disables the limit"),
      MSIQA_NUMBER_KEY("seed", seed, std::uint64_t, "seed for initialization, shuffling and synthesis"),
      MSIQA_BOOL_KEY("deterministic", deterministic, "single-threaded evaluation; false lets evaluation use `workers` threads"),
      MSIQA_NUMBER_KEY("workers", workers, Index, "threads for non-deterministic-mode evaluation"),
      MSIQA_BOOL_KEY("eval_each_epoch", eval_each_epoch, "report eval-split SROCC/PLCC after every epoch"),
      MSIQA_NUMBER_KEY("input_resolution", input_resolution, Index, "square input side, multiple of 32"),
      KeySpec{"residual_backbone", "residual50 or toy_residual",
              [](TrainConfig& c, std::string_view v) {
                c.residual_backbone = parse_kind("residual_backbone", v, false);
              },
              [](const TrainConfig& c) { return std::string(backbones::to_string(c.residual_backbone)); }},
      KeySpec{"residual_channels", "four stage widths or 'default'",
              [](TrainConfig& c, std::string_view v) { c.residual_channels = parse_channels("residual_channels", v); },
              [](const TrainConfig& c) { return format_channels(c.residual_channels); }},
      MSIQA_TEXT_KEY("residual_checkpoint", residual_checkpoint, "tensor file with residual backbone weights"),
      KeySpec{"windowed_backbone", "windowed_tiny or toy_windowed",
              [](TrainConfig& c, std::string_view v) {
                c.windowed_backbone = parse_kind("windowed_backbone", v, true);
              },
              [](const TrainConfig& c) { return std::string(backbones::to_string(c.windowed_backbone)); }},
      KeySpec{"windowed_channels", "four stage widths or 'default'",
              [](TrainConfig& c, std::string_view v) { c.windowed_channels = parse_channels("windowed_channels", v); },
              [](const TrainConfig& c) { return format_channels(c.windowed_channels); }},
      MSIQA_TEXT_KEY("windowed_checkpoint", windowed_checkpoint, "tensor file with windowed backbone weights"),
      MSIQA_NUMBER_KEY("window_size", window_size, Index, "attention window; 0 picks 7 (tiny) or 4 (toy)"),
      MSIQA_BOOL_KEY("freeze_backbones", freeze_backbones, "keep backbone weights fixed during training"),
      MSIQA_NUMBER_KEY("reduced_dim", fusion.reduced_dim, Index, "per-stage descriptor width D"),
      MSIQA_NUMBER_KEY("pool_kernel", fusion.pool_kernel, Index, "max-pool window over fused vectors"),
      MSIQA_NUMBER_KEY("hidden", regressor.hidden, Index, "hidden width of both regressor branches"),
      MSIQA_NUMBER_KEY("leaky_slope", regressor.leaky_slope, double, "negative slope of the leaky ReLUs"),
      MSIQA_NUMBER_KEY("alpha", loss.alpha, double, "sigmoid scale inside the ranking loss"),
      MSIQA_NUMBER_KEY("lambda1", loss.lambda1, double, "weight of the squared-error term"),
      MSIQA_NUMBER_KEY("lambda2", loss.lambda2, double, "weight of the ranking term"),
      MSIQA_BOOL_KEY("use_rm", use_rm, "enable the residual backbone"),
      MSIQA_BOOL_KEY("use_stm", use_stm, "enable the windowed-attention backbone"),
      MSIQA_BOOL_KEY("use_msffm", fusion.use_attention,
                     "enable attention fusion; off routes stage-4 descriptors to the regressor"),
      MSIQA_BOOL_KEY("use_srm_weight_branch", regressor.use_weight_branch,
                     "multiply the score by the weight branch"),
      KeySpec{"stages", "stages feeding the fused vector, contiguous from 1",
              [](TrainConfig& c, std::string_view v) { c.fusion.stage_count = parse_stages("stages", v); },
              [](const TrainConfig& c) { return format_stages(c.fusion.stage_count); }},
      KeySpec{"eval_split", "split scored by evaluation: train or test",
              [](TrainConfig& c, std::string_view v) {
                try {
                  c.eval_split = dataset::parse_split(v);
                } catch (const Error&) {
                  fail(ErrorCode::invalid_argument, "eval_split: expected train or test, got '{}'", v);
                }
              },
              [](const TrainConfig& c) { return std::string(dataset::to_string(c.eval_split)); }},
  };
  return keys;
}

#undef MSIQA_NUMBER_KEY
#undef MSIQA_BOOL_KEY
#undef MSIQA_TEXT_KEY

std::optional<backbones::BackboneSpec> make_spec(BackboneKind kind, const backbones::StageChannels& channels,
                                                 const std::string& checkpoint, Index window) {
  auto spec = backbones::BackboneSpec::defaults(kind);
  if (channels != backbones::StageChannels{}) spec.stage_channels = channels;
  if (!checkpoint.empty()) spec.checkpoint_path = checkpoint;
  spec.window_size = window;
  return spec;
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](Index v, const char* key) {
    if (v <= 0) fail(ErrorCode::invalid_argument, "{} must be positive, got {}", key, v);
  };
  if (!(learning_rate > 0.0)) fail(ErrorCode::invalid_argument, "learning_rate must be positive");
  positive(batch_size, "batch_size");
  positive(epochs, "epochs");
  positive(workers, "workers");
  if (max_steps < 0) fail(ErrorCode::invalid_argument, "max_steps must be non-negative");
  if (window_size < 0) fail(ErrorCode::invalid_argument, "window_size must be non-negative");
  positive(input_resolution, "input_resolution");
  if (input_resolution % backbones::kSpatialMultiple != 0) {
    fail(ErrorCode::invalid_argument, "input_resolution {} is not a multiple of {}", input_resolution,
         backbones::kSpatialMultiple);
  }
  if (!use_rm && !use_stm) fail(ErrorCode::invalid_argument, "use_rm and use_stm cannot both be off");
  positive(regressor.hidden, "hidden");
  if (!(regressor.leaky_slope >= 0.0)) fail(ErrorCode::invalid_argument, "leaky_slope must be non-negative");
  loss.validate();
  if (auto spec = residual_spec()) backbones::validate(*spec);
  if (auto spec = windowed_spec()) backbones::validate(*spec);
  fusion::validate(fusion_inputs(), fusion);
}

std::optional<backbones::BackboneSpec> TrainConfig::residual_spec() const {
  if (!use_rm) return std::nullopt;
  return make_spec(residual_backbone, residual_channels, residual_checkpoint, 0);
}

std::optional<backbones::BackboneSpec> TrainConfig::windowed_spec() const {
  if (!use_stm) return std::nullopt;
  return make_spec(windowed_backbone, windowed_channels, windowed_checkpoint, window_size);
}

fusion::FusionInputs TrainConfig::fusion_inputs() const {
  fusion::FusionInputs inputs;
  if (auto spec = residual_spec()) inputs.residual = spec->stage_channels;
  if (auto spec = windowed_spec()) inputs.windowed = spec->stage_channels;
  return inputs;
}

TrainConfig TrainConfig::toy() {
  TrainConfig cfg;
  cfg.residual_backbone = BackboneKind::toy_residual;
  cfg.windowed_backbone = BackboneKind::toy_windowed;
  cfg.input_resolution = 64;
  cfg.fusion.reduced_dim = 8;
  cfg.regressor.hidden = 16;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  return cfg;
}

void set_option(TrainConfig& cfg, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const auto& spec : schema()) {
    if (key == spec.name) {
      spec.set(cfg, value);
      return;
    }
  }
  fail(ErrorCode::invalid_argument, "unknown configuration key '{}'", key);
}

void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    fail(ErrorCode::invalid_argument, "override '{}' is not of the form key=value", assignment);
  }
  set_option(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

void apply_config_text(TrainConfig& cfg, std::string_view text) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      fail(ErrorCode::invalid_argument, "config line {}: expected 'key = value'", line_no);
    }
    try {
      set_option(cfg, line.substr(0, eq), line.substr(eq + 1));
    } catch (const Error& e) {
      fail(e.code(), "config line {}: {}", line_no, e.what());
    }
  }
}

TrainConfig parse_config(std::string_view text) {
  TrainConfig cfg;
  apply_config_text(cfg, text);
  return cfg;
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open config '{}'", path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  apply_config_text(cfg, buf.str());
}

TrainConfig load_config(const std::filesystem::path& path) {
  TrainConfig cfg;
  apply_config_file(cfg, path);
  return cfg;
}

std::vector<std::pair<std::string, std::string>> to_key_values(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& spec : schema()) out.emplace_back(spec.name, spec.get(cfg));
  return out;
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : to_key_values(cfg)) out += fmt::format("{} = {}\n", key, value);
  return out;
}

std::vector<KeyDoc> describe_keys() {
  const TrainConfig defaults;
  std::vector<KeyDoc> out;
  for (const auto& spec : schema()) out.push_back({spec.name, spec.get(defaults), spec.help});
  return out;
}

}  // namespace msiqa
