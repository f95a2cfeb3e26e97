#pragma once

#include <stdexcept>
#include <string>

namespace manipshield {

// Every failure raised by the library carries one of these kinds. The CLI maps
// kIo to exit status 2 and everything else to 1.
enum class ErrorKind {
  kFormat,
  kLength,
  kData,
  kShape,
  kDomain,
  kParameter,
  kInsufficientData,
  kClassBalance,
  kValidation,
  kState,
  kPolicy,
  kNotFound,
  kConflict,
  kConfig,
  kIndex,
  kIo,
  kDivergence,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace manipshield
