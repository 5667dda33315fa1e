#pragma once

#include <stdexcept>
#include <string>

namespace usseg {

// Invalid tensor shapes or incompatible axes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid module or run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A forward op produced NaN/Inf.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File or serialization failure.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace usseg
