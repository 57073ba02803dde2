#pragma once

#include <stdexcept>
#include <string>

namespace camkit {

/// Failure categories. Callers that need to tell failures apart (the weight
/// loader, the Netpbm decoder, the CLI exit-code mapping) switch on these.
enum class Errc {
  shape_mismatch,
  invalid_argument,
  bad_magic,
  spec_mismatch,
  truncated,
  trailing_data,
  bad_maxval,
  short_data,
  io_error,
  parse_error,
  label_out_of_range,
  divergence,
  no_cache,
  ineligible_architecture,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::bad_magic: return "bad_magic";
    case Errc::spec_mismatch: return "spec_mismatch";
    case Errc::truncated: return "truncated";
    case Errc::trailing_data: return "trailing_data";
    case Errc::bad_maxval: return "bad_maxval";
    case Errc::short_data: return "short_data";
    case Errc::io_error: return "io_error";
    case Errc::parse_error: return "parse_error";
    case Errc::label_out_of_range: return "label_out_of_range";
    case Errc::divergence: return "divergence";
    case Errc::no_cache: return "no_cache";
    case Errc::ineligible_architecture: return "ineligible_architecture";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code), detail_(message) {}

  Errc code() const noexcept { return code_; }
  /// The message without the category prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace camkit
