#pragma once

/**
 * @file errors.hpp
 * @brief Error taxonomy. std::invalid_argument and std::domain_error are used
 *        directly for contract violations; the types here carry process-level
 *        failure classes the CLI maps to exit codes.
 */

#include <stdexcept>
#include <string>

namespace delight {

/// Bad or missing configuration, checkpoints, or weight artifacts. Exit 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Unusable dataset contents. Exit 3.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite value raised by a training loop. Exit 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace delight
