// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mededit {

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape / dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range token or element index.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Violated API precondition (wrong argument, context overflow, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, failed factorizations, diverged optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (bad magic, truncated payload, ...).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset schema violation; message names the case_id and the failed rule.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mededit
