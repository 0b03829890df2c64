#pragma once

#include <stdexcept>
#include <string>

namespace fvla {

// Exit-code taxonomy used by the CLI: 2 config, 3 data, 4 numerical.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape violations; message names the offending shapes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct GraphError : std::runtime_error {
  explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fvla
