#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace impression {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Raised when an image has no positive vote weight for a trait.
class ZeroWeightMass : public Error {
 public:
  using Error::Error;
};

class UnknownVoter : public Error {
 public:
  using Error::Error;
};

/// Pearson correlation is undefined because one input has zero variance.
class ConstantInput : public Error {
 public:
  using Error::Error;
};

/// Too few images qualify for an evaluation protocol.
class NotEnoughImages : public Error {
 public:
  using Error::Error;
};

}  // namespace impression
