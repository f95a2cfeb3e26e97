#include "manipshield/error.hpp"

namespace manipshield {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kLength: return "length error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kDomain: return "domain error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kInsufficientData: return "insufficient data";
    case ErrorKind::kClassBalance: return "class balance error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kState: return "state error";
    case ErrorKind::kPolicy: return "policy error";
    case ErrorKind::kNotFound: return "not found";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kDivergence: return "divergence";
  }
  return "error";
}

}  // namespace manipshield
