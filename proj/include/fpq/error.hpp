#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fpq {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An operator received tensors whose shapes violate its rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf reached a graph boundary.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset or checkpoint bytes. offset() is the byte position where
// decoding stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// A checkpoint written by a different format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training loss exceeded the divergence threshold or became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step) : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace fpq
