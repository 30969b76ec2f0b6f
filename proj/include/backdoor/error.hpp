#pragma once

#include <stdexcept>
#include <string>

namespace backdoor {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A metric whose denominator is empty (no qualifying records, single-class labels).
// The harness records these as absent cells.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  using Error::Error;
};

}  // namespace backdoor
