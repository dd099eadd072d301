#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kgrag {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A lookup (entity, embedding key, encoding) that the caller required to exist.
class MissingKeyError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was invoked before the stage producing its inputs,
// or with artifacts built from an incompatible configuration.
class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

// Remote encoder / LLM failure. `status()` is the last HTTP status (0 when
// the connection itself failed); `attempts()` counts requests issued.
class ServiceError : public Error {
 public:
  ServiceError(const std::string& what, int status, int attempts, bool retriable)
      : Error(what), status_(status), attempts_(attempts), retriable_(retriable) {}

  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }
  bool retriable() const noexcept { return retriable_; }

 private:
  int status_;
  int attempts_;
  bool retriable_;
};

class TimeoutError : public ServiceError {
 public:
  TimeoutError(const std::string& what, int attempts)
      : ServiceError(what, 0, attempts, false) {}
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace kgrag
