// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <stdexcept>
#include <string>

namespace dgtr {

// Raised when a caller violates an operation's precondition.
class ContractError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

enum class FormatErrorCode {
    BadMagic,
    BadVersion,
    Truncated,
    BadChecksum,
    ShapeMismatch,
    TooLarge,
    Malformed,
    Io,
};

const char *toString(FormatErrorCode code);

// Raised by decoders of on-disk and on-wire formats.
class FormatError : public std::runtime_error {
  public:
    FormatError(FormatErrorCode code, const std::string &what)
        : std::runtime_error(std::string(toString(code)) + ": " + what), mCode(code) {}

    FormatErrorCode
    code() const noexcept {
        return mCode;
    }

  private:
    FormatErrorCode mCode;
};

class TransportError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Numerical blow-up during optimization (non-finite loss, diverged parameters).
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace dgtr
