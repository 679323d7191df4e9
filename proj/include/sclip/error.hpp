#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace sclip {

enum class Errc {
  zero_row,
  non_finite,
  dim_mismatch,
  bad_temperature,
  length_mismatch,
  bad_lambda,
  zero_kernel_row,
  degenerate_row,
  batch_too_small,
  k_too_large,
  non_finite_loss,
  spec_invalid,
  config_invalid,
  parse_error,
  bad_magic,
  io_error,
};

/// Library-wide error. `index()` carries the offending row/line where the
/// condition is positional (ZeroRow, DegenerateRow, ParseError, ...).
class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string message)
      : std::runtime_error(std::move(message)), code_(code) {}
  Error(Errc code, std::string message, std::size_t index)
      : std::runtime_error(std::move(message)), code_(code), index_(index) {}

  Errc code() const noexcept { return code_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  Errc code_;
  std::optional<std::size_t> index_;
};

// Process exit classes used by the CLI: 2 config/validation, 3 numerical, 4 IO.
inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::config_invalid:
    case Errc::spec_invalid:
    case Errc::parse_error:
    case Errc::bad_magic:
      return 2;
    case Errc::io_error:
      return 4;
    default:
      return 3;
  }
}

}  // namespace sclip
