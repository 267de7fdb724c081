#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace cm3 {

// Error taxonomy shared by the library and the CLI. Each class carries a
// stable process exit code so scripts can branch on the failure kind.
class Error : public std::runtime_error {
 public:
  Error(std::string cls, int exit_code, const std::string& msg)
      : std::runtime_error(msg), cls_(std::move(cls)), exit_code_(exit_code) {}

  const std::string& cls() const { return cls_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string cls_;
  int exit_code_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", 2, m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", 3, m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", 4, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", 5, m) {}
};
struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string& m) : Error("invalid", 6, m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", 7, m) {}
};
struct InternalError : Error {
  explicit InternalError(const std::string& m) : Error("internal", 8, m) {}
};

}  // namespace cm3
