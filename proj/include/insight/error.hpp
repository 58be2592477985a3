#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace insight {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `offset` is the byte offset where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// File written by an incompatible format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied option or configuration value.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Persisted state disagrees with the requested configuration.
class StateMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace insight
