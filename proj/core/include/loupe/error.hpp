#pragma once

#include <stdexcept>
#include <string>

namespace loupe {

/// Base class for every error raised by the library. The CLI maps these to
/// exit code 2 (data or contract violation).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree with what an operation requires.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Malformed or inconsistent files, manifests and datasets.
class DataError : public Error {
public:
  using Error::Error;
};

/// Arguments outside an operation's domain (alpha out of range, etc).
class DomainError : public Error {
public:
  using Error::Error;
};

} // namespace loupe
