#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace ftgan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shape, range, batch size...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// A file could not be read or did not have the expected layout.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Input parsed but failed semantic validation (manifest rules, configs).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A loss or tensor became NaN/Inf during training.
class NanError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

}  // namespace ftgan

// Message arguments are only formatted when the check fails.
#define FTGAN_EXPECTS(cond, ...)                                                \
  do {                                                                          \
    if (!(cond)) {                                                              \
      throw ::ftgan::ContractViolation(::ftgan::detail::concat(__VA_ARGS__));   \
    }                                                                           \
  } while (0)
