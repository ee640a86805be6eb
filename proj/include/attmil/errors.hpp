#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace attmil {

/// Tensor extents do not agree with what an operation requires.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value argument is outside its documented domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Configuration is inconsistent or cannot be satisfied by the data.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric is mathematically undefined for the given inputs.
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Named entity (bag id, parameter name) not found.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Optimisation hit a non-finite gradient.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::string param, std::int64_t step, const std::string& what)
      : std::runtime_error(what), param_(std::move(param)), step_(step) {}

  const std::string& param() const noexcept { return param_; }
  std::int64_t step() const noexcept { return step_; }

 private:
  std::string param_;
  std::int64_t step_;
};

/// Binary container could not be decoded. Carries the byte offset of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace attmil
