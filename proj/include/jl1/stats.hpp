#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace jl1 {

double mean(std::span<const double> xs);
double sample_variance(std::span<const double> xs);  // unbiased, n-1

// Gini coefficient of a non-negative sample; 0 for a perfectly even
// distribution (including the all-zero sample), approaching 1 when the
// mass concentrates in a single entry.
double gini(std::span<const double> nonneg);

// One-sided Welch t-test for H1: mean(a) > mean(b), with the
// Welch-Satterthwaite degrees of freedom.
struct WelchResult {
  double t = 0;
  double df = 0;
  double p = 1;  // one-sided p-value
};
WelchResult welch_one_sided(std::span<const double> a,
                            std::span<const double> b);

// Pearson chi-squared goodness-of-fit p-value against the uniform
// distribution over the given bins.
double chi2_uniform_p(const std::vector<std::int64_t>& counts);

}  // namespace jl1
