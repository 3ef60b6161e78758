#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace msinet {

// Invalid argument to a public operation (bad shape, bad axis, unknown label).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input text: config files, manifests, descriptors, rasters.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : std::runtime_error(where + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_ = 0;
};

// A computation could not produce a meaningful value (e.g. no valid queries).
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN or Inf appeared in a forward value, gradient or parameter.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Broken internal invariant; indicates a bug rather than bad input.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace msinet
