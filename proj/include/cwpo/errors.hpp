#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cwpo {

// Base of every error the library throws. `kind()` is the machine-readable tag
// the CLI reports; `exit_code()` maps usage/config problems to 2 and
// everything else to 1.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }
  virtual int exit_code() const noexcept { return 1; }

 private:
  std::string kind_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& m) : Error("argument", m) {}
  int exit_code() const noexcept override { return 2; }
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& key_path, const std::string& m)
      : Error("config", key_path + ": " + m), key_path_(key_path) {}
  const std::string& key_path() const noexcept { return key_path_; }
  int exit_code() const noexcept override { return 2; }

 private:
  std::string key_path_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& m)
      : Error("parse", "line " + std::to_string(line) + ": " + m), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& m)
      : Error("schema", "line " + std::to_string(line) + ": " + m), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& m) : Error("range", m) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& m) : Error("length", m) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& m) : Error("generation", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

// A non-finite value showed up; `node()` names the operation that produced it.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string node, const std::string& m)
      : Error("non_finite", node + ": " + m), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

// Throws NonFiniteError naming `node` unless `v` is finite.
double check_finite(double v, const char* node);

}  // namespace cwpo
