#pragma once

#include <stdexcept>
#include <string>

namespace ffecg {

/// Base of every error thrown by the library. `module()` names the
/// subsystem that raised it; what() is prefixed with it.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& message)
      : std::runtime_error(module + ": " + message), module_(std::move(module)) {}
  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Preconditions on datasets and splits (too few subjects, missing pairing...).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class DegenerateEmbeddingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  DecodeError(std::string module, const std::string& file, const std::string& why)
      : Error(std::move(module), "cannot decode '" + file + "': " + why), file_(file) {}
  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& term, const std::string& message)
      : Error("training", "non-finite " + term + " loss: " + message), term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

// Train/test leakage found at evaluation time.
class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace ffecg
