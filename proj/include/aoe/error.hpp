#pragma once

#include <stdexcept>
#include <string>

namespace aoe {

/// Operational failure (I/O, malformed input files). CLI exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed safetensors content or index layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or incompatible inputs. CLI exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace aoe
