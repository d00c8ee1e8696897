#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace jl1 {

// 8-bit grayscale raster, row-major.
struct Pgm {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::uint8_t> pixels;
};

// Reads a binary PGM (P5) with maxval 255. Comments in the header are
// accepted; any other magic or maxval is a format_error.
Pgm read_pgm(const std::filesystem::path& path);

// Writes binary PGM (P5), maxval 255.
void write_pgm(const std::filesystem::path& path, const Pgm& img);

// Signed-to-gray export mapping shared by every component/Jacobian
// image: v -> clamp(round(128 + 127*v/scale), 0, 255). `scale` is the
// max |v| over the whole set being exported so that one image's
// contrast is comparable to its siblings'; scale <= 0 maps everything
// to mid-gray 128.
std::uint8_t signed_gray(double v, double scale);

// Renders a height*width buffer of signed values through signed_gray.
Pgm signed_gray_image(const double* v, std::int64_t height,
                      std::int64_t width, double scale);

}  // namespace jl1
