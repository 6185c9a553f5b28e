#pragma once

#include <stdexcept>
#include <string>

namespace vqct {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/volume extents that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Arguments outside an operation's domain (bad config, too few samples, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed MVOL/VQCK payloads.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Divergence or non-finite gradients during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace vqct
