#include "jl1/stats.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "jl1/errors.hpp"

namespace jl1 {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw contract_error("mean: empty sample");
  double s = 0;
  for (double v : xs) s += v;
  return s / static_cast<double>(xs.size());
}

double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) throw contract_error("sample_variance: need n >= 2");
  const double m = mean(xs);
  double s = 0;
  for (double v : xs) s += (v - m) * (v - m);
  return s / static_cast<double>(xs.size() - 1);
}

double gini(std::span<const double> nonneg) {
  if (nonneg.empty()) throw contract_error("gini: empty sample");
  std::vector<double> xs(nonneg.begin(), nonneg.end());
  double total = 0;
  for (double v : xs) {
    if (v < 0) throw contract_error("gini: negative value");
    total += v;
  }
  if (total == 0) return 0.0;
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double weighted = 0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    weighted += static_cast<double>(i + 1) * xs[i];
  return 2.0 * weighted / (n * total) - (n + 1.0) / n;
}

WelchResult welch_one_sided(std::span<const double> a,
                            std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw contract_error("welch_one_sided: need n >= 2 per group");
  const double ma = mean(a), mb = mean(b);
  const double va = sample_variance(a), vb = sample_variance(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  WelchResult r;
  if (se2 == 0) {
    // Degenerate: identical constants in both groups.
    r.t = ma > mb ? HUGE_VAL : (ma < mb ? -HUGE_VAL : 0.0);
    r.df = na + nb - 2;
    r.p = ma > mb ? 0.0 : 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 /
         (va * va / (na * na * (na - 1)) + vb * vb / (nb * nb * (nb - 1)));
  boost::math::students_t dist(r.df);
  r.p = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

double chi2_uniform_p(const std::vector<std::int64_t>& counts) {
  if (counts.size() < 2)
    throw contract_error("chi2_uniform_p: need at least 2 bins");
  std::int64_t total = 0;
  for (auto c : counts) {
    if (c < 0) throw contract_error("chi2_uniform_p: negative count");
    total += c;
  }
  if (total == 0) throw contract_error("chi2_uniform_p: empty sample");
  const double expected =
      static_cast<double>(total) / static_cast<double>(counts.size());
  double x2 = 0;
  for (auto c : counts) {
    const double d = static_cast<double>(c) - expected;
    x2 += d * d / expected;
  }
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, x2));
}

}  // namespace jl1
