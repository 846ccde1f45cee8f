// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint container using the safetensors layout: a
// little-endian u64 header length, a JSON header mapping each tensor name to
// {dtype, shape, data_offsets}, an optional "__metadata__" string map, then
// the raw tensor bytes. Tensors are written as F64 and round-trip bit-exact;
// F32 tensors are accepted on read and widened.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msiqa/parameters.hpp"

namespace msiqa {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct TensorFile {
  std::vector<TensorRecord> tensors;
  std::map<std::string, std::string> metadata;

  const TensorRecord* find(std::string_view name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

TensorFile to_tensor_file(const ParameterSet& params);

struct LoadReport {
  std::vector<std::string> missing;  // expected but absent; initial values kept
  std::vector<std::string> extra;    // present in the file but unused
};

// Copies every same-named tensor of `file` into `params`. Throws
// shape_mismatch when a shared name disagrees in shape or when the file
// shares no tensor name with `params` at all.
LoadReport load_into(ParameterSet& params, const TensorFile& file, std::string_view prefix = {});

}  // namespace msiqa
