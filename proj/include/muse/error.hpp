#pragma once

#include <stdexcept>
#include <string>

namespace muse {

enum class ErrorKind {
  MissingColumn,
  MalformedRow,
  InvalidEnum,
  UnknownContentId,
  InvalidArgument,
  OrderingViolation,
  ShapeMismatch,
  IndexOutOfRange,
  EmptyDataset,
  Provenance,
  Io,
  Config,
};

const char* to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and tests)
// can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  // The message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace muse
