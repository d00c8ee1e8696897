#pragma once

#include <stdexcept>
#include <string>

namespace jl1 {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or size mismatch between tensors / buffers.
struct dimension_error : error {
  using error::error;
};

// API misuse: invalid arguments, out-of-range config values, calling
// things in the wrong order (e.g. backward on a consumed tape).
struct contract_error : error {
  using error::error;
};

// Filesystem-level failure: cannot open, read or write a file.
struct io_error : error {
  using error::error;
};

// File opened fine but its contents are not what the format requires.
struct format_error : error {
  using error::error;
};

// Non-finite values showed up where they must not (NaN/Inf is an error
// state in this codebase, never a silent value).
struct numeric_error : error {
  using error::error;
};

}  // namespace jl1
