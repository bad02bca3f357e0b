#pragma once

#include <stdexcept>
#include <string>

namespace gdream {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text. `line()` is 0 when the source has no line info.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line = 0)
      : Error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class UnsupportedJointError : public Error {
 public:
  UnsupportedJointError(const std::string& joint, const std::string& type)
      : Error("unsupported joint '" + joint + "' of type '" + type + "'"), joint_(joint) {}
  const std::string& joint() const { return joint_; }

 private:
  std::string joint_;
};

/// Graph topology violations: cycles, several roots, dangling parents.
class StructureError : public Error {
  using Error::Error;
};

class ConfigError : public Error {
  using Error::Error;
};

class ShapeError : public Error {
  using Error::Error;
};

class DomainError : public Error {
  using Error::Error;
};

class NumericError : public Error {
  using Error::Error;
};

/// Corrupt or version-mismatched files.
class FormatError : public Error {
  using Error::Error;
};

class OptimizationError : public Error {
  using Error::Error;
};

class SamplingError : public Error {
 public:
  SamplingError(const std::string& what, int step)
      : Error(what + " at sampling step " + std::to_string(step)), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace gdream
