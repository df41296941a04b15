// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace budbreak {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or sequence dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (CSV files, seasons, labels).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint file is corrupt, truncated, or from another format version.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint was loaded against a different model architecture.
class SpecMismatchError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace budbreak
