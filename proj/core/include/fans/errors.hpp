// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fans {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree with an operation's requirements.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an API call was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Annotated data is inconsistent (length mismatches, unknown labels, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A binary or text file does not follow its declared format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A model or training configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fans
