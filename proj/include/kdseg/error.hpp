#pragma once

#include <stdexcept>
#include <string>

namespace kdseg {

// Base for every error thrown by the library. The CLI maps these to exit
// code 1; anything escaping as a plain std::exception is a bug.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement between operands.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// Invalid argument value (temperature <= 0, empty branch set, ...).
class ParamError : public Error {
 public:
  explicit ParamError(const std::string& msg) : Error("parameter error: " + msg) {}
};

// Malformed input data (label id out of range, bitmask mismatch, ...).
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

// Filesystem / stream failure, message carries the path.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Inconsistent incremental plan (class with no eligible samples, ...).
class ScenarioError : public Error {
 public:
  explicit ScenarioError(const std::string& msg) : Error("scenario error: " + msg) {}
};

// Cross-run report merge failure.
class ReportError : public Error {
 public:
  explicit ReportError(const std::string& msg) : Error("report error: " + msg) {}
};

// Checkpoint file rejected; Kind tells the tests which guard fired.
class CheckpointError : public Error {
 public:
  enum class Kind { BadMagic, BadVersion, Truncated, Layout };

  CheckpointError(Kind kind, const std::string& msg)
      : Error("checkpoint error: " + msg), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace kdseg
