#include "jl1/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "jl1/errors.hpp"

namespace jl1 {

FactorSchema dots_schema(std::int64_t positions) {
  FactorSchema s;
  for (int dot = 1; dot <= 3; ++dot) {
    s.names.push_back("dot" + std::to_string(dot) + ".x");
    s.names.push_back("dot" + std::to_string(dot) + ".y");
  }
  s.cardinalities.assign(6, positions);
  s.ordered.assign(6, true);
  return s;
}

Tensor render_three_dots(const DotsSpec& spec, const FactorVector& factors) {
  spec.validate();
  dots_schema(spec.positions).validate_factors(factors);
  const std::int64_t s = spec.size;
  const double step = static_cast<double>(s) / static_cast<double>(spec.positions);
  const double r2 = spec.radius * spec.radius;
  Tensor img = Tensor::full({1, s, s}, 1.0f);
  for (int dot = 0; dot < 3; ++dot) {
    const double cx = static_cast<double>(factors[2 * dot]) * step + 0.5;
    const double cy = static_cast<double>(factors[2 * dot + 1]) * step + 0.5;
    // Only visit the dot's bounding box; painting black is idempotent,
    // so overlapping dots combine correctly.
    const auto y_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - spec.radius - 1)));
    const auto y_hi = std::min<std::int64_t>(s - 1, static_cast<std::int64_t>(std::ceil(cy + spec.radius)));
    const auto x_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - spec.radius - 1)));
    const auto x_hi = std::min<std::int64_t>(s - 1, static_cast<std::int64_t>(std::ceil(cx + spec.radius)));
    for (std::int64_t py = y_lo; py <= y_hi; ++py)
      for (std::int64_t px = x_lo; px <= x_hi; ++px) {
        const double dx = (static_cast<double>(px) + 0.5) - cx;
        const double dy = (static_cast<double>(py) + 0.5) - cy;
        if (dx * dx + dy * dy <= r2) img[py * s + px] = 0.0f;
      }
  }
  return img;
}

Tensor DatasetCache::image(std::int64_t i) const {
  if (i < 0 || i >= count)
    throw contract_error("cache record index out of range: " + std::to_string(i));
  const std::int64_t p = pixels_per_image();
  Tensor out = Tensor::zeros({channels, height, width});
  const std::uint8_t* src = pixels.data() + i * p;
  for (std::int64_t j = 0; j < p; ++j)
    out[j] = static_cast<float>(src[j]) / 255.0f;
  return out;
}

FactorVector DatasetCache::factor_vector(std::int64_t i) const {
  if (i < 0 || i >= count)
    throw contract_error("cache record index out of range: " + std::to_string(i));
  const std::int64_t f = schema.count();
  FactorVector out(static_cast<std::size_t>(f));
  for (std::int64_t j = 0; j < f; ++j)
    out[static_cast<std::size_t>(j)] = factors[i * f + j];
  return out;
}

FactorVector dots_cache_factors(const DotsSpec& spec, std::uint64_t seed,
                                std::int64_t record) {
  Rng rng = substream(seed, "cache-record", static_cast<std::uint64_t>(record));
  FactorVector f(6);
  for (auto& v : f)
    v = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(spec.positions)));
  return f;
}

DatasetCache build_dots_cache(const DotsSpec& spec, std::int64_t count,
                              std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw contract_error("build_dots_cache: count must be >= 1");
  DatasetCache cache;
  cache.count = count;
  cache.channels = 1;
  cache.height = spec.size;
  cache.width = spec.size;
  cache.schema = dots_schema(spec.positions);
  cache.factors.reserve(static_cast<std::size_t>(count * 6));
  cache.pixels.reserve(static_cast<std::size_t>(count * spec.size * spec.size));
  for (std::int64_t i = 0; i < count; ++i) {
    FactorVector f = dots_cache_factors(spec, seed, i);
    for (auto v : f) cache.factors.push_back(static_cast<std::uint16_t>(v));
    Tensor img = render_three_dots(spec, f);
    for (std::int64_t j = 0; j < img.numel(); ++j)
      cache.pixels.push_back(
          static_cast<std::uint8_t>(std::lround(255.0f * img[j])));
  }
  return cache;
}

namespace {

constexpr char kMagic[4] = {'J', 'L', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
    b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::string& path) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (in.gcount() != sizeof(U))
    throw format_error(path + ": truncated cache file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_cache(const std::filesystem::path& path, const DatasetCache& cache) {
  const std::int64_t f = cache.schema.count();
  if (cache.count < 0 || cache.height < 1 || cache.width < 1 ||
      cache.channels < 1 || cache.channels > 255 || f > 255 ||
      cache.height > 65535 || cache.width > 65535)
    throw contract_error("write_cache: header fields out of format range");
  if (static_cast<std::int64_t>(cache.factors.size()) != cache.count * f ||
      static_cast<std::int64_t>(cache.pixels.size()) !=
          cache.count * cache.pixels_per_image())
    throw contract_error("write_cache: record payload does not match header");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cache.count));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(cache.channels));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(cache.height));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(cache.width));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(f));
  for (auto c : cache.schema.cardinalities)
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(c));
  const std::int64_t p = cache.pixels_per_image();
  for (std::int64_t i = 0; i < cache.count; ++i) {
    for (std::int64_t j = 0; j < f; ++j)
      put_le<std::uint16_t>(out, cache.factors[i * f + j]);
    out.write(reinterpret_cast<const char*>(cache.pixels.data() + i * p),
              static_cast<std::streamsize>(p));
  }
  if (!out) throw io_error("failed writing " + path.string());
}

DatasetCache read_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  const std::string p = path.string();
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || magic[0] != 'J' || magic[1] != 'L' ||
      magic[2] != 'D' || magic[3] != 'C')
    throw format_error(p + ": not a JLDC dataset cache");
  const auto version = get_le<std::uint32_t>(in, p);
  if (version != kVersion)
    throw format_error(p + ": unsupported cache version " +
                       std::to_string(version));
  DatasetCache cache;
  cache.count = get_le<std::uint32_t>(in, p);
  cache.channels = get_le<std::uint8_t>(in, p);
  cache.height = get_le<std::uint16_t>(in, p);
  cache.width = get_le<std::uint16_t>(in, p);
  const std::int64_t f = get_le<std::uint8_t>(in, p);
  for (std::int64_t j = 0; j < f; ++j) {
    auto card = get_le<std::uint16_t>(in, p);
    if (card == 0) throw format_error(p + ": zero factor cardinality");
    cache.schema.names.push_back("f" + std::to_string(j));
    cache.schema.cardinalities.push_back(card);
    cache.schema.ordered.push_back(true);
  }
  const std::int64_t ppi = cache.pixels_per_image();
  cache.factors.resize(static_cast<std::size_t>(cache.count * f));
  cache.pixels.resize(static_cast<std::size_t>(cache.count * ppi));
  for (std::int64_t i = 0; i < cache.count; ++i) {
    for (std::int64_t j = 0; j < f; ++j) {
      auto v = get_le<std::uint16_t>(in, p);
      if (v >= cache.schema.cardinalities[static_cast<std::size_t>(j)])
        throw format_error(p + ": factor value out of range in record " +
                           std::to_string(i));
      cache.factors[i * f + j] = v;
    }
    in.read(reinterpret_cast<char*>(cache.pixels.data() + i * ppi),
            static_cast<std::streamsize>(ppi));
    if (in.gcount() != static_cast<std::streamsize>(ppi))
      throw format_error(p + ": truncated pixel data in record " +
                         std::to_string(i));
  }
  return cache;
}

Tensor sample_batch(const DatasetCache& cache, std::int64_t batch_size,
                    Rng& rng, std::vector<FactorVector>* factors) {
  if (cache.count < 1) throw contract_error("sample_batch: empty cache");
  if (batch_size < 1)
    throw contract_error("sample_batch: batch_size must be >= 1");
  Tensor out = Tensor::zeros(
      {batch_size, cache.channels, cache.height, cache.width});
  if (factors) factors->clear();
  const std::int64_t p = cache.pixels_per_image();
  for (std::int64_t b = 0; b < batch_size; ++b) {
    const auto i = static_cast<std::int64_t>(
        rng.next_below(static_cast<std::uint64_t>(cache.count)));
    const std::uint8_t* src = cache.pixels.data() + i * p;
    float* dst = out.ptr() + b * p;
    for (std::int64_t j = 0; j < p; ++j)
      dst[j] = static_cast<float>(src[j]) / 255.0f;
    if (factors) factors->push_back(cache.factor_vector(i));
  }
  return out;
}

DatasetCache crop_natural(const std::vector<Tensor>& sources,
                          std::int64_t count, std::int64_t crop, Rng& rng) {
  if (sources.empty()) throw contract_error("crop_natural: no source images");
  if (count < 1 || crop < 1)
    throw contract_error("crop_natural: count and crop must be >= 1");
  std::vector<Tensor> rescaled;
  rescaled.reserve(sources.size());
  for (const auto& src : sources) {
    if (src.rank() != 2)
      throw dimension_error("crop_natural: sources must be rank-2 [H,W]");
    if (src.shape[0] < crop || src.shape[1] < crop)
      throw dimension_error("crop_natural: source smaller than crop size");
    float lo = src[0], hi = src[0];
    for (std::int64_t i = 0; i < src.numel(); ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    Tensor r = Tensor::zeros(src.shape);
    if (hi > lo) {
      const float inv = 1.0f / (hi - lo);
      for (std::int64_t i = 0; i < src.numel(); ++i) r[i] = (src[i] - lo) * inv;
    } else {
      std::fill(r.data.begin(), r.data.end(), 0.5f);  // degenerate source
    }
    rescaled.push_back(std::move(r));
  }
  DatasetCache cache;
  cache.count = count;
  cache.channels = 1;
  cache.height = crop;
  cache.width = crop;
  cache.pixels.reserve(static_cast<std::size_t>(count * crop * crop));
  for (std::int64_t i = 0; i < count; ++i) {
    const auto s = static_cast<std::size_t>(rng.next_below(rescaled.size()));
    const Tensor& img = rescaled[s];
    const auto y0 = static_cast<std::int64_t>(rng.next_below(
        static_cast<std::uint64_t>(img.shape[0] - crop + 1)));
    const auto x0 = static_cast<std::int64_t>(rng.next_below(
        static_cast<std::uint64_t>(img.shape[1] - crop + 1)));
    for (std::int64_t y = 0; y < crop; ++y)
      for (std::int64_t x = 0; x < crop; ++x)
        cache.pixels.push_back(static_cast<std::uint8_t>(
            std::lround(255.0f * img[(y0 + y) * img.shape[1] + (x0 + x)])));
  }
  return cache;
}

namespace {

// One every-other-pixel halving: keeps pixels at even indices.
Tensor halve(const Tensor& img) {
  const std::int64_t h = img.shape[0], w = img.shape[1];
  Tensor out = Tensor::zeros({h / 2, w / 2});
  for (std::int64_t y = 0; y < h / 2; ++y)
    for (std::int64_t x = 0; x < w / 2; ++x)
      out[y * (w / 2) + x] = img[(2 * y) * w + 2 * x];
  return out;
}

}  // namespace

Tensor tile_2x2(const std::array<Tensor, 4>& images) {
  std::array<Tensor, 4> small;
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor& img = images[i];
    if (img.rank() != 2 || img.shape[0] != img.shape[1])
      throw dimension_error("tile_2x2: inputs must be square rank-2 images");
    if (img.shape[0] < 64)
      throw dimension_error("tile_2x2: inputs must be at least 64x64");
    Tensor cur = img;
    while (cur.shape[0] > 32) {
      if (cur.shape[0] % 2 != 0)
        throw dimension_error(
            "tile_2x2: size " + std::to_string(img.shape[0]) +
            " cannot reach 32 by every-other-pixel halving");
      cur = halve(cur);
    }
    if (cur.shape[0] != 32)
      throw dimension_error("tile_2x2: size " + std::to_string(img.shape[0]) +
                            " cannot reach 32 by every-other-pixel halving");
    small[i] = std::move(cur);
  }
  Tensor out = Tensor::zeros({1, 64, 64});
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x = 0; x < 64; ++x) {
      const std::size_t quad =
          static_cast<std::size_t>((y / 32) * 2 + (x / 32));
      out[y * 64 + x] = small[quad][(y % 32) * 32 + (x % 32)];
    }
  return out;
}

std::vector<bool> off_support_mask(const DotsSpec& spec,
                                   const FactorVector& factors) {
  spec.validate();
  dots_schema(spec.positions).validate_factors(factors);
  const std::int64_t s = spec.size;
  const double step = static_cast<double>(s) / static_cast<double>(spec.positions);
  const double far = 2.0 * spec.radius + 2.0;
  const double far2 = far * far;
  std::vector<bool> mask(static_cast<std::size_t>(s * s), true);
  for (int dot = 0; dot < 3; ++dot) {
    const double cx = static_cast<double>(factors[2 * dot]) * step + 0.5;
    const double cy = static_cast<double>(factors[2 * dot + 1]) * step + 0.5;
    for (std::int64_t py = 0; py < s; ++py)
      for (std::int64_t px = 0; px < s; ++px) {
        const double dx = (static_cast<double>(px) + 0.5) - cx;
        const double dy = (static_cast<double>(py) + 0.5) - cy;
        if (dx * dx + dy * dy <= far2)
          mask[static_cast<std::size_t>(py * s + px)] = false;
      }
  }
  return mask;
}

}  // namespace jl1
