// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xkws {

// Precondition violated by a caller-supplied value.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bytes on disk do not follow the expected layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed content that violates a semantic constraint.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A referenced id/keyword is missing from a store.
class LookupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Metric has no defined value for the given input (e.g. single class).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TooShortError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training diverged (NaN/inf loss).
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xkws
