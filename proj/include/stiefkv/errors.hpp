#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stiefkv {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

class DegenerateInputError : public Error {
public:
  using Error::Error;
};

/// Raised by QR-based routines when a pivot falls below the rank tolerance.
class RankDeficiencyError : public Error {
public:
  RankDeficiencyError(const std::string &what, std::size_t column)
      : Error(what), column_(column) {}
  std::size_t column() const noexcept { return column_; }

private:
  std::size_t column_;
};

class NumericError : public Error {
public:
  using Error::Error;
};

class ContractError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
public:
  TrainingDivergedError(const std::string &what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

private:
  std::size_t step_;
};

class AllocationError : public Error {
public:
  using Error::Error;
};

class DiagnosticsError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  FormatError(const std::string &what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

class StaleArtifactError : public Error {
public:
  using Error::Error;
};

class UsageError : public Error {
public:
  using Error::Error;
};

} // namespace stiefkv
