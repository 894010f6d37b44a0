// Error types shared across modules.

#pragma once

#include <stdexcept>
#include <string>

namespace ebmreg {

// Invalid configuration or malformed arguments (sizes, ranges, empty inputs).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ebmreg
