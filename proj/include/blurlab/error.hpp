#pragma once

#include <stdexcept>
#include <string>

namespace blurlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidParameter : Error {
  using Error::Error;
};

struct DegenerateKernel : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct TrainingDivergence : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace blurlab
