#pragma once

#include <stdexcept>
#include <string>

namespace joel {

// Input violates a documented invariant (bad taxonomy, unknown concept, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file could not be parsed or has the wrong format/version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An API was called out of order or with inconsistent arguments.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace joel
