#pragma once

#include <concepts>
#include <stdexcept>
#include <string>

namespace attnorm {

// Shapes or extents that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid layer / network / run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed files (IDX, checkpoint, config).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or failed numerical checks.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Using state that has not been produced yet (e.g. running statistics).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Mode { kTrain, kEval };

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Activations are reallocated every step, so this removes most page faults.
void retain_heap_memory();

template <class T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

}  // namespace attnorm
