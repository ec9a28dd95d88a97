#pragma once

#include <stdexcept>
#include <string>

namespace mscrack {

// Runtime failures (exit code 2 at the CLI boundary).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Usage or configuration problems (exit code 1 at the CLI boundary).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mscrack
