#pragma once

#include <stdexcept>
#include <string>

namespace contrastsurv {

// Runtime failure (numerical breakdown, I/O, broken model file, ...).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid input: bad file content, violated precondition, bad config.
// The CLI maps this to exit code 2, everything else to 1.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error(msg) {}
};

}  // namespace contrastsurv
