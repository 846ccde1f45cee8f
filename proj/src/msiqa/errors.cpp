// SPDX-License-Identifier: Apache-2.0
#include "msiqa/errors.hpp"

namespace msiqa {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::parameter_mismatch: return "parameter mismatch";
    case ErrorCode::io: return "i/o error";
    case ErrorCode::format: return "format error";
    case ErrorCode::undefined_metric: return "undefined metric";
    case ErrorCode::codec: return "codec failure";
    case ErrorCode::internal: return "internal error";
  }
  return "unknown error";
}

}  // namespace msiqa
