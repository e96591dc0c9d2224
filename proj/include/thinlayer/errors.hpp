#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace thinlayer {

// Invalid input data (geometry, material, configuration values).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A configuration document that does not match the expected schema.
// `path` names the offending key, e.g. "/cell/hole/half_axes".
class SchemaError : public std::runtime_error {
 public:
  SchemaError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Singular systems, failed factorizations, residuals above tolerance.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace thinlayer
