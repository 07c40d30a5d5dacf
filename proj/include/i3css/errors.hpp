#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace i3css {

// Root of every error the library throws.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible.
class DimensionError : public Error {
  public:
    using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
  public:
    using Error::Error;
};

// A value became non-finite where finiteness is required.
class NumericError : public Error {
  public:
    using Error::Error;
};

class ParseError : public Error {
  public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

// Well-formed input that breaks a schema or shape rule.
class ValidationError : public Error {
  public:
    using Error::Error;
};

// Model and data configurations disagree.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Binary container has the wrong magic or version.
class FormatError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
    IoError(const std::string& what, std::size_t offset)
        : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

  private:
    std::size_t offset_ = 0;
};

}  // namespace i3css
