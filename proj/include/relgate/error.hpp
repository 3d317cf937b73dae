#pragma once

#include <stdexcept>
#include <string>

namespace relgate {

// Error categories map 1:1 onto CLI exit codes (see tools/relgate_main.cpp).
enum class ErrorKind {
    config,   // bad or inconsistent configuration
    data,     // bad dataset, token range, sequence length, missing artifact
    numeric,  // NaN/Inf or divergence detected mid-computation
    io,       // filesystem / serialization failure
    shape,    // matrix dimension mismatch (programming or artifact error)
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace relgate
