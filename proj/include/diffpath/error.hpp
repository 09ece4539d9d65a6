#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace diffpath {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor container; carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DegenerateTimestep : public Error {
 public:
  using Error::Error;
};

/// A predictor violated its output contract (shape or finiteness).
class ContractError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class InsufficientTrajectory : public Error {
 public:
  using Error::Error;
};

class ComponentCollapse : public Error {
 public:
  ComponentCollapse(const std::string& what, int component) : Error(what), component_(component) {}

  int component() const noexcept { return component_; }

 private:
  int component_;
};

class GridExhausted : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value; `key()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace diffpath
