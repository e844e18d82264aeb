#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

/// Base class of all errors thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid configuration or input detected before any work is done.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// File or stream failure. The message names the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace voxseg
