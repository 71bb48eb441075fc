#pragma once

#include <stdexcept>
#include <string>

namespace nrnm {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A NaN/Inf appeared, or a computation diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value or missing field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// API misuse, e.g. backward on a value that is not on the tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed external data. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message : message),
        message_(message),
        line_(line) {}

  std::size_t line() const { return line_; }
  // Message without the line prefix.
  const std::string& message() const { return message_; }

 private:
  std::string message_;
  std::size_t line_;
};

}  // namespace nrnm
