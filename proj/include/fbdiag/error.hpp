#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fbdiag {

enum class ErrorKind {
  MalformedRecord,
  InvariantViolation,
  EmptyTrace,
  DuplicateWorker,
  NoWorkers,
  EmptySession,
  OutOfOrderEvent,
  NonPositiveIterationTime,
  MissedWindow,
  SpecInvalid,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::EmptyTrace: return "EmptyTrace";
    case ErrorKind::DuplicateWorker: return "DuplicateWorker";
    case ErrorKind::NoWorkers: return "NoWorkers";
    case ErrorKind::EmptySession: return "EmptySession";
    case ErrorKind::OutOfOrderEvent: return "OutOfOrderEvent";
    case ErrorKind::NonPositiveIterationTime: return "NonPositiveIterationTime";
    case ErrorKind::MissedWindow: return "MissedWindow";
    case ErrorKind::SpecInvalid: return "SpecInvalid";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Parse failure pinned to a file position. line is 1-based; 0 means "whole file".
class RecordError : public Error {
 public:
  RecordError(ErrorKind kind, std::string file, std::size_t line, const std::string& reason)
      : Error(kind, file + ":" + std::to_string(line) + ": " + reason),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

}  // namespace fbdiag
