#pragma once

#include <stdexcept>
#include <string>

namespace casdiff {

/// Root of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered, or a decomposition that cannot be trusted.
class NumericFailure : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// On-disk data that fails validation (bad magic, checksum, hash collision).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// A file written by an incompatible format version.
class IncompatibleVersion : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class EncoderUnavailable : public Error {
 public:
  using Error::Error;
};

}  // namespace casdiff
