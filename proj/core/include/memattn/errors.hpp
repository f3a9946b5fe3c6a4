#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace memattn {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or lengths that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument outside its valid domain (negative std, r_local > 1, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration detected before any work starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File does not carry the expected magic/version/dtype.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Truncated or checksum-failing file contents.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// Inputs whose geometry disagrees with a declared header.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// A bank whose tensor geometry cannot serve a given block/encoder.
class BankIncompatibleError : public Error {
 public:
  using Error::Error;
};

// Failure while pulling a retrieved entry's payload into a forward pass.
class RetrievalError : public Error {
 public:
  RetrievalError(std::uint64_t entry_id, const std::string& what)
      : Error("retrieval of entry " + std::to_string(entry_id) +
              " failed: " + what),
        entry_id_(entry_id) {}

  std::uint64_t entry_id() const noexcept { return entry_id_; }

 private:
  std::uint64_t entry_id_;
};

// Bank build produced nothing usable.
class BuildError : public Error {
 public:
  using Error::Error;
};

}  // namespace memattn
