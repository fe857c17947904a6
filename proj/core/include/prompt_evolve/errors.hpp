#pragma once

#include <stdexcept>
#include <string>

namespace prompt_evolve {

// Base of every error the engine raises. The CLI maps the subclasses onto
// distinct exit codes (config = 1, numeric = 2, I/O = 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace prompt_evolve
