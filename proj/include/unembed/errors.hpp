#pragma once

#include <stdexcept>
#include <string>

namespace unembed {

// Invalid victim or experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input to an operation (bad token id, empty prompt, shape mismatch).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The API refused a request. `code` is the stable, wire-visible identifier;
// a rejection carries nothing else.
class ApiError : public std::runtime_error {
 public:
  ApiError(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Client-side transport failure (connect, timeout, malformed body). Never
// raised for an API rejection; those arrive as ApiError.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerically unusable data: singular system, indefinite quadratic form,
// negative cycle in a constraint graph, undefined metric.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace unembed
