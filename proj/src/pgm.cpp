#include "jl1/pgm.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "jl1/errors.hpp"

namespace jl1 {

namespace {

// Skips whitespace and '#' comments, then reads one decimal token.
std::int64_t next_header_int(std::istream& in, const std::string& path) {
  for (;;) {
    int c = in.peek();
    if (c == EOF)
      throw format_error(path + ": truncated PGM header");
    if (c == '#') {
      in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  std::int64_t v = 0;
  if (!(in >> v) || v < 0)
    throw format_error(path + ": malformed integer in PGM header");
  return v;
}

}  // namespace

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5')
    throw format_error(path.string() + ": not a binary PGM (P5) file");
  Pgm img;
  img.width = next_header_int(in, path.string());
  img.height = next_header_int(in, path.string());
  std::int64_t maxval = next_header_int(in, path.string());
  if (img.width < 1 || img.height < 1)
    throw format_error(path.string() + ": invalid PGM dimensions");
  if (maxval != 255)
    throw format_error(path.string() + ": only maxval 255 is supported, got " +
                       std::to_string(maxval));
  in.get();  // the single whitespace byte before pixel data
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw format_error(path.string() + ": truncated PGM pixel data");
  return img;
}

void write_pgm(const std::filesystem::path& path, const Pgm& img) {
  if (img.width < 1 || img.height < 1 ||
      img.pixels.size() != static_cast<std::size_t>(img.width * img.height))
    throw contract_error("write_pgm: inconsistent image dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw io_error("failed writing " + path.string());
}

std::uint8_t signed_gray(double v, double scale) {
  if (!(scale > 0.0)) return 128;
  double g = std::round(128.0 + 127.0 * v / scale);
  if (g < 0.0) g = 0.0;
  if (g > 255.0) g = 255.0;
  return static_cast<std::uint8_t>(g);
}

Pgm signed_gray_image(const double* v, std::int64_t height, std::int64_t width,
                      double scale) {
  if (height < 1 || width < 1)
    throw contract_error("signed_gray_image: empty geometry");
  Pgm img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<std::size_t>(width * height));
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = signed_gray(v[i], scale);
  return img;
}

}  // namespace jl1
