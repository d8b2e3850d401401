#pragma once

#include <stdexcept>
#include <string>

namespace freqexit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents of two operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Class index or element index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward twice).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (pixmap headers, parameter containers, sidecars).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Configuration value or argument outside its documented domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset contents unusable for the requested operation (empty class
/// directories, too few samples to stratify, unsupported class count).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace freqexit
