#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "jl1/datasets.hpp"
#include "jl1/models.hpp"
#include "jl1/rng.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

// How one local disentanglement evaluation is drawn: n_repeats
// independent local samples of n_points factor vectors each, with every
// ordered factor confined to an L-inf ball of radius
// floor(rho * (cardinality - 1)) grid steps around a uniform centroid.
struct LocalSampleSpec {
  double rho = 0.1;
  std::int64_t n_points = 10000;
  std::int64_t n_repeats = 20;
  std::int64_t n_bins = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Mutual information estimates (nats) between each latent and each
// factor, plus the factor entropies, for one sample.
struct MIProfile {
  std::int64_t latents = 0;
  std::int64_t factors = 0;
  std::vector<double> mi;              // row-major [latents x factors]
  std::vector<double> factor_entropy;  // [factors]

  double at(std::int64_t latent, std::int64_t factor) const {
    return mi[static_cast<std::size_t>(latent * factors + factor)];
  }
};

// Deterministic embedding: posterior means, [N, L]. Two calls on the
// same images agree bitwise.
Tensor representation(const Vae& model, const Tensor& images);

// One local sample of factor vectors (the first centroid draw and the
// per-point draws all come from `rng` in a fixed order).
std::vector<FactorVector> sample_local_factors(const FactorSchema& schema,
                                               const LocalSampleSpec& spec,
                                               Rng& rng);

// Shannon entropy (nats) of a label series.
double entropy_discrete(std::span<const std::int64_t> labels);

// Plug-in mutual information (nats) from the joint empirical histogram.
double mutual_info_discrete(std::span<const std::int64_t> a,
                            std::span<const std::int64_t> b);

// Equal-width bins over the observed min/max; a constant series maps to
// bin 0 everywhere.
std::vector<std::int64_t> discretize_equal_width(std::span<const float> values,
                                                 std::int64_t bins);

// MI of every (latent, factor) pair. Series lengths must agree.
MIProfile mi_profile(const std::vector<std::vector<std::int64_t>>& latent_labels,
                     const std::vector<std::vector<std::int64_t>>& factor_labels);

// Mean over positive-entropy factors of the normalized top-two gap
// (I_top - I_second) / H(v_k). Requires >= 2 latents; throws if every
// factor has zero entropy.
double mig(const MIProfile& profile);

// Mean over latents of 1 - delta_i, where delta_i measures how much a
// latent's mutual information spreads beyond its best factor. Latents
// with no information score 0. Requires >= 2 factors.
double modularity(const MIProfile& profile);

enum class MetricKind { mig, modularity };
std::string metric_kind_name(MetricKind kind);
MetricKind metric_kind_from_name(const std::string& name);

// Renders one factor vector to an image [C, H, W].
using Generator = std::function<Tensor(const FactorVector&)>;
// Embeds a batch [N, C, H, W] to latents [N, L].
using Embedder = std::function<Tensor(const Tensor&)>;

struct LocalMetricResult {
  double mean = 0;
  std::vector<double> per_repeat;
};

// The local disentanglement score: for each repeat, draw a local
// sample, render, embed, discretize latents (equal-width bins over the
// sample), and compute the chosen metric against the raw factor values;
// factors constant within a sample are dropped. A sample with too few
// varying factors is redrawn (at most 10 times). rho = 1 is the global
// metric.
LocalMetricResult local_metric(const Embedder& embed, const Generator& gen,
                               const FactorSchema& schema,
                               const LocalSampleSpec& spec, MetricKind which);

// Adapters for the production path.
Embedder vae_embedder(const Vae& model);
Generator dots_generator(const DotsSpec& spec);

// Metric CSV: one row per repeat plus a repeat=-1 mean row.
struct MetricCsvRow {
  std::string model_id;
  std::uint64_t seed = 0;
  std::string metric;
  double rho = 0;
  std::int64_t repeat = 0;
  double value = 0;
};

inline constexpr const char* kMetricCsvHeader =
    "model_id,seed,metric,rho,repeat,value";

std::vector<MetricCsvRow> metric_rows(const std::string& model_id,
                                      std::uint64_t seed,
                                      MetricKind which, double rho,
                                      const LocalMetricResult& result);

std::string format_metric_row(const MetricCsvRow& row);

void write_metric_csv(const std::filesystem::path& path,
                      const std::vector<MetricCsvRow>& rows);

}  // namespace jl1
