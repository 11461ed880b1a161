#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mmfusion {

enum class ErrorKind {
  kShape,
  kConfig,
  kFormat,
  kData,
  kDomain,
  kLookup,
  kNumeric,
  kOracle,
  kTraining,
  kIo,
};

const char* to_string(ErrorKind kind);

/// Base of every exception thrown by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MMFUSION_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& message) : Error(Kind, message) {}   \
  };

MMFUSION_DEFINE_ERROR(ShapeError, ErrorKind::kShape)
MMFUSION_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
MMFUSION_DEFINE_ERROR(DataError, ErrorKind::kData)
MMFUSION_DEFINE_ERROR(DomainError, ErrorKind::kDomain)
MMFUSION_DEFINE_ERROR(LookupError, ErrorKind::kLookup)
MMFUSION_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
MMFUSION_DEFINE_ERROR(OracleError, ErrorKind::kOracle)
MMFUSION_DEFINE_ERROR(IoError, ErrorKind::kIo)

#undef MMFUSION_DEFINE_ERROR

/// Malformed binary input. `offset` is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& message, std::uint64_t offset)
      : Error(ErrorKind::kFormat, message + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, std::size_t step)
      : Error(ErrorKind::kTraining, message + " at step " + std::to_string(step)), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace mmfusion
