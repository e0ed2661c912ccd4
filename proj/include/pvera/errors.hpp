#pragma once

#include <stdexcept>
#include <string>

namespace pvera {

/// Base class for every error raised by the toolkit. `exit_code()` is the
/// process status the CLI reports when the error escapes a command.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual int exit_code() const { return 1; }
};

/// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Class index or element index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an operation's precondition (wrong mode, wrong adapter kind...).
class ContractError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

/// Invalid configuration value or unparsable config file.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

/// Input data is unusable (empty, too small for the requested split).
class InputError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

/// A required file or directory does not exist.
class MissingInputError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

/// On-disk bytes do not follow the expected format (bad magic, truncation).
class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

/// File contents are well-formed but disagree with each other or the manifest.
class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

/// Operation refused because of the object's state (e.g. already merged).
class StateError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

/// A verification command found a violation.
class CheckFailed : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 5; }
};

}  // namespace pvera
