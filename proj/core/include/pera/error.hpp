#pragma once

#include <stdexcept>
#include <string>

namespace pera {

enum class ErrorKind {
  kConfig,
  kIngestion,
  kAugmentation,
  kNumerical,
  kContract,
  kCheckpoint,
  kIo,
  kCapability,
  kTraining,
  kInternal,
};

const char* to_string(ErrorKind kind);

/// Single exception type for every expected failure in the library. The kind
/// drives CLI exit codes; the message is meant to be shown to a user as-is.
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

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace pera
