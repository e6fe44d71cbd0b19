#pragma once

#include <stdexcept>
#include <string>

namespace capskan {

// Error categories mirror the CLI exit-code taxonomy:
// config -> 2, data/IO -> 3, numeric -> 4, everything else -> 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace capskan
