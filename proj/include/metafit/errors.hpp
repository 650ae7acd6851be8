#pragma once

#include <stdexcept>
#include <string>

namespace metafit {

// Error hierarchy shared by the library and the CLI.
// CLI exit codes: 0 success, 2 config/usage, 3 data, 4 numeric.
struct Error : std::runtime_error {
  Error(std::string msg, int code) : std::runtime_error(std::move(msg)), exit_code(code) {}
  int exit_code;
};

struct ConfigError : Error {
  explicit ConfigError(std::string m) : Error(std::move(m), 2) {}
};

struct UsageError : Error {
  explicit UsageError(std::string m) : Error(std::move(m), 2) {}
};

// Shape mismatch between operands of a tensor primitive.
struct ShapeError : UsageError {
  explicit ShapeError(std::string m) : UsageError(std::move(m)) {}
};

struct DataError : Error {
  explicit DataError(std::string m) : Error(std::move(m), 3) {}
};

struct NumericError : Error {
  explicit NumericError(std::string m) : Error(std::move(m), 4) {}
};

// Input outside the real domain of a primitive (log of non-positive, etc.).
struct DomainError : NumericError {
  explicit DomainError(std::string m) : NumericError(std::move(m)) {}
};

}  // namespace metafit
