#pragma once

#include <stdexcept>
#include <string>

namespace hsarnn {

/// Base class for every error raised by the library. `module()` names the
/// component that raised it ("kernel", "datastore", ...).
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message);

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Tensor shape or operand mismatch inside a kernel operator.
class ShapeError : public Error {
 public:
  ShapeError(std::string opcode, const std::string& detail);

  const std::string& opcode() const noexcept { return opcode_; }

 private:
  std::string opcode_;
};

/// Malformed or truncated file. `field()` names the offending header field.
class FormatError : public Error {
 public:
  FormatError(std::string module, std::string field, const std::string& detail);

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Invalid configuration, or a configuration that does not match the data
/// or checkpoint it is paired with.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsarnn
