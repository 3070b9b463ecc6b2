#pragma once

#include <stdexcept>
#include <string>

namespace archdoor {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameter outside the mathematical domain of an operation (sigma <= 0, p > 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data: empty corpora, labels out of range, ids outside the vocabulary.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. The message always names the offending line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Invalid experiment/backdoor/poison configuration. Messages carry the field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or numeric overflow during training or inference.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace archdoor
