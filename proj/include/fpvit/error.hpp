#pragma once

#include <stdexcept>
#include <string>

namespace fpvit {

enum class ErrorKind {
  Io,
  Decode,
  UnsupportedFormat,
  InvalidArgument,
  ShapeMismatch,
  NoRidgeStructure,
  Parse,
  Invariant,
  ConfigMismatch,
  VersionMismatch,
  NonFinite,
  State,
};

const char* to_string(ErrorKind kind);

/// Exception carrying a machine-checkable category next to the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace fpvit
