// SPDX-License-Identifier: Apache-2.0
#include "msiqa/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "msiqa/errors.hpp"

namespace msiqa {

static_assert(std::endian::native == std::endian::little, "tensor files assume little-endian hosts");

namespace {

using Json = nlohmann::ordered_json;

constexpr std::uint64_t kMaxHeader = 100u << 20;

}  // namespace

const TensorRecord* TensorFile::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  Json header = Json::object();
  if (!file.metadata.empty()) {
    Json meta = Json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::uint64_t offset = 0;
  for (const auto& t : file.tensors) {
    if (static_cast<Index>(t.values.size()) != numel(t.shape)) {
      fail(ErrorCode::shape_mismatch, "tensor '{}' has {} values for shape {}", t.name,
           t.values.size(), to_string(t.shape));
    }
    const std::uint64_t bytes = t.values.size() * sizeof(double);
    header[t.name] = {{"dtype", "F64"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open '{}' for writing", path.string());
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : file.tensors) {
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!out) fail(ErrorCode::io, "failed writing '{}'", path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open '{}'", path.string());
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || length == 0 || length > kMaxHeader) {
    fail(ErrorCode::format, "'{}' is not a tensor file (bad header length)", path.string());
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) fail(ErrorCode::format, "'{}': truncated header", path.string());
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Json header;
  try {
    header = Json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorCode::format, "'{}': malformed header: {}", path.string(), e.what());
  }
  TensorFile file;
  try {
    for (const auto& [key, entry] : header.items()) {
      if (key == "__metadata__") {
        for (const auto& [mk, mv] : entry.items()) file.metadata[mk] = mv.get<std::string>();
        continue;
      }
      TensorRecord record;
      record.name = key;
      record.shape = entry.at("shape").get<Shape>();
      const auto dtype = entry.at("dtype").get<std::string>();
      const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
      const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
      const auto count = static_cast<std::uint64_t>(numel(record.shape));
      const std::size_t width = dtype == "F64" ? 8 : dtype == "F32" ? 4 : 0;
      if (width == 0) fail(ErrorCode::format, "tensor '{}': unsupported dtype {}", key, dtype);
      if (end < begin || end > data.size() || end - begin != count * width) {
        fail(ErrorCode::format, "tensor '{}': data offsets inconsistent with shape", key);
      }
      record.values.resize(count);
      if (width == 8) {
        std::memcpy(record.values.data(), data.data() + begin, count * 8);
      } else {
        for (std::uint64_t i = 0; i < count; ++i) {
          float f;
          std::memcpy(&f, data.data() + begin + i * 4, 4);
          record.values[i] = f;
        }
      }
      file.tensors.push_back(std::move(record));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, "'{}': malformed header: {}", path.string(), e.what());
  }
  return file;
}

TensorFile to_tensor_file(const ParameterSet& params) {
  TensorFile file;
  for (const auto& p : params.entries()) {
    file.tensors.push_back(
        {p.name, p.var.shape(), std::vector<double>(p.var.values().begin(), p.var.values().end())});
  }
  return file;
}

LoadReport load_into(ParameterSet& params, const TensorFile& file, std::string_view prefix) {
  LoadReport report;
  std::size_t matched = 0;
  // Validate every shape before mutating anything.
  for (const auto& p : params.entries()) {
    const TensorRecord* rec = file.find(std::string(prefix) + p.name);
    if (!rec) {
      report.missing.push_back(p.name);
      continue;
    }
    if (rec->shape != p.var.shape()) {
      fail(ErrorCode::shape_mismatch, "tensor '{}' has shape {} in file, expected {}", rec->name,
           to_string(rec->shape), to_string(p.var.shape()));
    }
    ++matched;
  }
  if (matched == 0 && params.size() > 0) {
    fail(ErrorCode::shape_mismatch, "file shares no tensors with the target (expected e.g. '{}{}')",
         prefix, params.entries().front().name);
  }
  for (const auto& rec : file.tensors) {
    if (!rec.name.starts_with(prefix) || !params.contains(rec.name.substr(prefix.size()))) {
      report.extra.push_back(rec.name);
    }
  }
  for (const auto& p : params.entries()) {
    const TensorRecord* rec = file.find(std::string(prefix) + p.name);
    if (!rec) continue;
    Var target = p.var;
    std::copy(rec->values.begin(), rec->values.end(), target.mutable_values().begin());
  }
  return report;
}

}  // namespace msiqa
