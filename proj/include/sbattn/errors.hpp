#pragma once

#include <stdexcept>
#include <string>

namespace sbattn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A layer, model or run was configured with values it cannot honour.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An object was used outside of its lifetime (e.g. backward twice).
class LifecycleError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Batch statistics cannot be formed (e.g. one element per channel).
class StatisticsError : public Error {
 public:
  using Error::Error;
};

/// On-disk data does not follow the expected binary layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace sbattn
