#pragma once

#include <stdexcept>
#include <string>

namespace normtune {

// Base of every error the library throws. `kind()` is a short stable tag the
// CLI prints so failures stay machine-parsable.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, const char* kind = "error")
      : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& what) : Error(what, "invalid_argument") {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error(what, "format") {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(what, "io") {}
};

struct VocabularyMismatch : Error {
  explicit VocabularyMismatch(const std::string& what) : Error(what, "vocabulary_mismatch") {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(what, "numeric") {}
};

}  // namespace normtune
