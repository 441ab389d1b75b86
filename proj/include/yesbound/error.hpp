#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace yesbound {

enum class ErrorKind {
  InvalidShape,
  InvalidSpec,
  InvalidArgument,
  InvalidToken,
  InvalidPermutation,
  NumericalFailure,
  TooLarge,
  FormatError,
  IoError,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidShape: return "InvalidShape";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvalidToken: return "InvalidToken";
    case ErrorKind::InvalidPermutation: return "InvalidPermutation";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::TooLarge: return "TooLarge";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

// Single exception type for the library; `position()` carries the offending
// index for InvalidToken/InvalidPermutation and the byte offset for
// FormatError.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, std::size_t position = npos)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind),
        position_(position) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::size_t position() const noexcept { return position_; }
  bool has_position() const noexcept { return position_ != npos; }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  ErrorKind kind_;
  std::size_t position_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what,
                              std::size_t position = Error::npos) {
  throw Error(kind, what, position);
}

}  // namespace yesbound
