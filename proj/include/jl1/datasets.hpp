#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "jl1/rng.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

// Integer factor values, one per schema slot.
using FactorVector = std::vector<std::int64_t>;

struct FactorSchema {
  std::vector<std::string> names;
  std::vector<std::int64_t> cardinalities;
  // Ordered factors vary inside a local ball; unordered ones are held
  // at the centroid by the local-metric sampler.
  std::vector<bool> ordered;

  std::int64_t count() const {
    return static_cast<std::int64_t>(cardinalities.size());
  }

  void validate_factors(const FactorVector& f) const {
    if (static_cast<std::int64_t>(f.size()) != count())
      throw contract_error("factor vector has wrong length");
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f[i] < 0 || f[i] >= cardinalities[i])
        throw contract_error("factor " + std::to_string(i) +
                             " out of range: " + std::to_string(f[i]));
  }
};

// Three identical hard-edged black discs on a white background; centers
// on an evenly spaced grid (grid step size/positions, offset 0.5 px).
struct DotsSpec {
  std::int64_t size = 64;
  std::int64_t positions = 64;
  double radius = 3.0;

  void validate() const {
    if (size < 1 || positions < 1 || !(radius > 0))
      throw contract_error("DotsSpec: size, positions, radius must be positive");
  }
};

// Factors: (x1, y1, x2, y2, x3, y3), each in [0, positions).
FactorSchema dots_schema(std::int64_t positions);

// Renders [1, size, size], pixels in {0.0, 1.0}. A pixel is black iff
// its center lies within `radius` of any dot center.
Tensor render_three_dots(const DotsSpec& spec, const FactorVector& factors);

// In-memory dataset: u8 pixels (value = round(255 * intensity)) plus
// per-record integer factor values. factor schema may be empty
// (natural-image crops carry no ground-truth factors).
struct DatasetCache {
  std::int64_t count = 0;
  std::int64_t channels = 1;
  std::int64_t height = 0;
  std::int64_t width = 0;
  FactorSchema schema;
  std::vector<std::uint16_t> factors;  // count * schema.count()
  std::vector<std::uint8_t> pixels;    // count * channels * height * width

  std::int64_t pixels_per_image() const { return channels * height * width; }

  // Decodes record i to [C, H, W] floats via u8 / 255.
  Tensor image(std::int64_t i) const;
  FactorVector factor_vector(std::int64_t i) const;
};

// Factors of record i in a cache built with `seed`: drawn from the
// substream ("cache-record", i), so any record can be regenerated
// without the file.
FactorVector dots_cache_factors(const DotsSpec& spec, std::uint64_t seed,
                                std::int64_t record);

// count i.i.d. uniform factor draws, rendered; deterministic per seed.
DatasetCache build_dots_cache(const DotsSpec& spec, std::int64_t count,
                              std::uint64_t seed);

void write_cache(const std::filesystem::path& path, const DatasetCache& cache);
DatasetCache read_cache(const std::filesystem::path& path);

// Uniform-with-replacement batch; returns images [B, C, H, W] and, when
// `factors` is non-null, the factor vector of each drawn record.
Tensor sample_batch(const DatasetCache& cache, std::int64_t batch_size,
                    Rng& rng, std::vector<FactorVector>* factors = nullptr);

// 16x16 (by default) crops from grayscale sources (rank-2 [H, W]
// tensors, any value range). Each source is rescaled to [0,1] by its own
// min/max first; a constant source degenerates to all-0.5. Per crop: a
// uniform source index, then top row, then left column.
DatasetCache crop_natural(const std::vector<Tensor>& sources,
                          std::int64_t count, std::int64_t crop, Rng& rng);

// Every-other-pixel downsampling of four square images to 32x32 each
// (sources must be 32*2^k with k >= 1), arranged [top-left, top-right,
// bottom-left, bottom-right] into one [1, 64, 64] image.
Tensor tile_2x2(const std::array<Tensor, 4>& images);

// Marks the pixels far away from every dot: true where the pixel center
// is more than 2*radius + 2 from each of the three dot centers. Decoder
// Jacobian mass landing on these pixels has no reconstruction purpose.
std::vector<bool> off_support_mask(const DotsSpec& spec,
                                   const FactorVector& factors);

}  // namespace jl1
