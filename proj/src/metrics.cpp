#include "jl1/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "jl1/errors.hpp"

namespace jl1 {

void LocalSampleSpec::validate() const {
  if (!(rho > 0.0) || rho > 1.0)
    throw contract_error("LocalSampleSpec: rho must be in (0, 1]");
  if (n_points <= 0) throw contract_error("LocalSampleSpec: n_points must be positive");
  if (n_repeats <= 0)
    throw contract_error("LocalSampleSpec: n_repeats must be positive");
  if (n_bins < 2) throw contract_error("LocalSampleSpec: n_bins must be >= 2");
}

Tensor representation(const Vae& model, const Tensor& images) {
  if (images.rank() != 4)
    throw dimension_error("representation: images must be [N, C, H, W]");
  const std::int64_t n = images.shape[0];
  const std::int64_t per = images.numel() / std::max<std::int64_t>(n, 1);
  Tensor out = Tensor::zeros({n, model.cfg.latent_dim});
  const std::int64_t chunk = 512;
  for (std::int64_t lo = 0; lo < n; lo += chunk) {
    const std::int64_t m = std::min(chunk, n - lo);
    Tensor part = Tensor::zeros(
        {m, images.shape[1], images.shape[2], images.shape[3]});
    std::copy_n(images.data.begin() + lo * per, m * per, part.data.begin());
    auto [mu, lv] = model.encode(nullptr, part);
    std::copy_n(mu.data.begin(), m * model.cfg.latent_dim,
                out.data.begin() + lo * model.cfg.latent_dim);
  }
  return out;
}

std::vector<FactorVector> sample_local_factors(const FactorSchema& schema,
                                               const LocalSampleSpec& spec,
                                               Rng& rng) {
  spec.validate();
  const std::int64_t f_count = schema.count();
  if (f_count < 1)
    throw contract_error("sample_local_factors: empty factor schema");

  FactorVector centroid(static_cast<std::size_t>(f_count));
  for (std::int64_t k = 0; k < f_count; ++k)
    centroid[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(
        rng.next_below(static_cast<std::uint64_t>(schema.cardinalities[k])));

  std::vector<FactorVector> out(static_cast<std::size_t>(spec.n_points));
  for (auto& point : out) {
    point.resize(static_cast<std::size_t>(f_count));
    for (std::int64_t k = 0; k < f_count; ++k) {
      const std::int64_t card = schema.cardinalities[k];
      const std::int64_t c = centroid[static_cast<std::size_t>(k)];
      if (!schema.ordered[static_cast<std::size_t>(k)]) {
        point[static_cast<std::size_t>(k)] = c;
        continue;
      }
      const auto radius = static_cast<std::int64_t>(
          std::floor(spec.rho * static_cast<double>(card - 1)));
      const std::int64_t lo = std::max<std::int64_t>(0, c - radius);
      const std::int64_t hi = std::min<std::int64_t>(card - 1, c + radius);
      point[static_cast<std::size_t>(k)] =
          lo + static_cast<std::int64_t>(
                   rng.next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }
  }
  return out;
}

namespace {

// Remaps arbitrary labels to dense 0..K-1 indices (first-seen order).
std::pair<std::vector<std::int64_t>, std::int64_t> densify(
    std::span<const std::int64_t> labels) {
  std::unordered_map<std::int64_t, std::int64_t> ids;
  std::vector<std::int64_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] =
        ids.try_emplace(labels[i], static_cast<std::int64_t>(ids.size()));
    out[i] = it->second;
  }
  return {std::move(out), static_cast<std::int64_t>(ids.size())};
}

}  // namespace

double entropy_discrete(std::span<const std::int64_t> labels) {
  if (labels.empty()) throw contract_error("entropy_discrete: empty series");
  auto [dense, k] = densify(labels);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (auto v : dense) counts[static_cast<std::size_t>(v)]++;
  const double n = static_cast<double>(labels.size());
  double h = 0;
  for (auto c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return std::max(0.0, h);
}

double mutual_info_discrete(std::span<const std::int64_t> a,
                            std::span<const std::int64_t> b) {
  if (a.empty()) throw contract_error("mutual_info_discrete: empty series");
  if (a.size() != b.size())
    throw dimension_error("mutual_info_discrete: length mismatch");
  auto [da, ka] = densify(a);
  auto [db, kb] = densify(b);
  std::vector<std::int64_t> joint(static_cast<std::size_t>(ka * kb), 0);
  std::vector<std::int64_t> ra(static_cast<std::size_t>(ka), 0);
  std::vector<std::int64_t> rb(static_cast<std::size_t>(kb), 0);
  for (std::size_t i = 0; i < da.size(); ++i) {
    joint[static_cast<std::size_t>(da[i] * kb + db[i])]++;
    ra[static_cast<std::size_t>(da[i])]++;
    rb[static_cast<std::size_t>(db[i])]++;
  }
  const double n = static_cast<double>(a.size());
  double mi = 0;
  for (std::int64_t i = 0; i < ka; ++i)
    for (std::int64_t j = 0; j < kb; ++j) {
      const auto c = joint[static_cast<std::size_t>(i * kb + j)];
      if (c == 0) continue;
      const double pij = static_cast<double>(c) / n;
      const double pi = static_cast<double>(ra[static_cast<std::size_t>(i)]) / n;
      const double pj = static_cast<double>(rb[static_cast<std::size_t>(j)]) / n;
      mi += pij * std::log(pij / (pi * pj));
    }
  return std::max(0.0, mi);
}

std::vector<std::int64_t> discretize_equal_width(std::span<const float> values,
                                                 std::int64_t bins) {
  if (bins < 1) throw contract_error("discretize_equal_width: bins must be >= 1");
  if (values.empty())
    throw contract_error("discretize_equal_width: empty series");
  float lo = values[0], hi = values[0];
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::int64_t> out(values.size(), 0);
  if (hi <= lo) return out;
  const double width = (static_cast<double>(hi) - static_cast<double>(lo)) /
                       static_cast<double>(bins);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto b = static_cast<std::int64_t>(
        std::floor((static_cast<double>(values[i]) - lo) / width));
    out[i] = std::clamp<std::int64_t>(b, 0, bins - 1);
  }
  return out;
}

MIProfile mi_profile(
    const std::vector<std::vector<std::int64_t>>& latent_labels,
    const std::vector<std::vector<std::int64_t>>& factor_labels) {
  if (latent_labels.empty() || factor_labels.empty())
    throw contract_error("mi_profile: need at least one latent and one factor");
  const std::size_t n = latent_labels[0].size();
  for (const auto& s : latent_labels)
    if (s.size() != n) throw dimension_error("mi_profile: ragged latent series");
  for (const auto& s : factor_labels)
    if (s.size() != n) throw dimension_error("mi_profile: ragged factor series");

  MIProfile p;
  p.latents = static_cast<std::int64_t>(latent_labels.size());
  p.factors = static_cast<std::int64_t>(factor_labels.size());
  p.mi.resize(static_cast<std::size_t>(p.latents * p.factors));
  p.factor_entropy.resize(static_cast<std::size_t>(p.factors));
  for (std::int64_t f = 0; f < p.factors; ++f)
    p.factor_entropy[static_cast<std::size_t>(f)] =
        entropy_discrete(factor_labels[static_cast<std::size_t>(f)]);
  for (std::int64_t l = 0; l < p.latents; ++l)
    for (std::int64_t f = 0; f < p.factors; ++f)
      p.mi[static_cast<std::size_t>(l * p.factors + f)] = mutual_info_discrete(
          latent_labels[static_cast<std::size_t>(l)],
          factor_labels[static_cast<std::size_t>(f)]);
  return p;
}

double mig(const MIProfile& profile) {
  if (profile.latents < 2)
    throw contract_error("mig: needs at least two latents");
  if (profile.factors < 1)
    throw contract_error("mig: needs at least one factor");
  double sum = 0;
  std::int64_t used = 0;
  for (std::int64_t f = 0; f < profile.factors; ++f) {
    const double h = profile.factor_entropy[static_cast<std::size_t>(f)];
    if (!(h > 0)) continue;
    double top = 0, second = 0;
    for (std::int64_t l = 0; l < profile.latents; ++l) {
      const double v = profile.at(l, f);
      if (v > top) {
        second = top;
        top = v;
      } else if (v > second) {
        second = v;
      }
    }
    sum += (top - second) / h;
    ++used;
  }
  if (used == 0)
    throw contract_error("mig: undefined, every factor has zero entropy");
  return sum / static_cast<double>(used);
}

double modularity(const MIProfile& profile) {
  if (profile.factors < 2)
    throw contract_error("modularity: needs at least two factors");
  if (profile.latents < 1)
    throw contract_error("modularity: needs at least one latent");
  double sum = 0;
  for (std::int64_t l = 0; l < profile.latents; ++l) {
    double theta = 0;
    std::int64_t best = 0;
    for (std::int64_t f = 0; f < profile.factors; ++f)
      if (profile.at(l, f) > theta) {
        theta = profile.at(l, f);
        best = f;
      }
    if (!(theta > 0)) continue;  // dead latent scores 0
    double delta = 0;
    for (std::int64_t f = 0; f < profile.factors; ++f) {
      if (f == best) continue;
      const double r = profile.at(l, f) / theta;
      delta += r * r;
    }
    delta /= static_cast<double>(profile.factors - 1);
    sum += 1.0 - delta;
  }
  return sum / static_cast<double>(profile.latents);
}

std::string metric_kind_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::mig: return "mig";
    case MetricKind::modularity: return "modularity";
  }
  throw contract_error("metric_kind_name: bad enum value");
}

MetricKind metric_kind_from_name(const std::string& name) {
  if (name == "mig") return MetricKind::mig;
  if (name == "modularity") return MetricKind::modularity;
  throw contract_error("unknown metric '" + name +
                       "' (choices: mig, modularity)");
}

namespace {

double one_local_sample(const Embedder& embed, const Generator& gen,
                        const FactorSchema& schema, const LocalSampleSpec& spec,
                        MetricKind which, Rng& rng) {
  const std::int64_t f_count = schema.count();
  const std::int64_t need = which == MetricKind::mig ? 1 : 2;

  std::vector<FactorVector> factors;
  std::vector<std::int64_t> varying;
  for (int attempt = 0; attempt < 10; ++attempt) {
    factors = sample_local_factors(schema, spec, rng);
    varying.clear();
    for (std::int64_t k = 0; k < f_count; ++k) {
      const std::int64_t first = factors[0][static_cast<std::size_t>(k)];
      for (const auto& p : factors)
        if (p[static_cast<std::size_t>(k)] != first) {
          varying.push_back(k);
          break;
        }
    }
    if (static_cast<std::int64_t>(varying.size()) >= need) break;
    varying.clear();
  }
  if (static_cast<std::int64_t>(varying.size()) < need)
    throw contract_error(
        "local_metric: degenerate local sample after 10 redraws (rho too "
        "small for this factor grid?)");

  // Render and embed in bounded chunks.
  const Tensor first_img = gen(factors[0]);
  if (first_img.rank() != 3)
    throw dimension_error("local_metric: generator must return [C, H, W]");
  const std::int64_t n = spec.n_points;
  const std::int64_t per = first_img.numel();
  const std::int64_t chunk = 512;
  Tensor z;  // [n, L], latent count learned from the first chunk
  std::int64_t latent_dim = -1;
  for (std::int64_t lo = 0; lo < n; lo += chunk) {
    const std::int64_t m = std::min(chunk, n - lo);
    Tensor batch = Tensor::zeros(
        {m, first_img.shape[0], first_img.shape[1], first_img.shape[2]});
    for (std::int64_t i = 0; i < m; ++i) {
      const Tensor img = lo + i == 0
                             ? first_img
                             : gen(factors[static_cast<std::size_t>(lo + i)]);
      if (img.shape != first_img.shape)
        throw dimension_error("local_metric: generator output shape varies");
      std::copy_n(img.data.begin(), per, batch.data.begin() + i * per);
    }
    Tensor zc = embed(batch);
    if (zc.rank() != 2 || zc.shape[0] != m)
      throw dimension_error("local_metric: embedder must return [N, L]");
    if (latent_dim < 0) {
      latent_dim = zc.shape[1];
      z = Tensor::zeros({n, latent_dim});
    } else if (zc.shape[1] != latent_dim) {
      throw dimension_error("local_metric: embedder latent size varies");
    }
    std::copy_n(zc.data.begin(), m * latent_dim,
                z.data.begin() + lo * latent_dim);
  }

  std::vector<std::vector<std::int64_t>> latent_labels(
      static_cast<std::size_t>(latent_dim));
  std::vector<float> column(static_cast<std::size_t>(n));
  for (std::int64_t l = 0; l < latent_dim; ++l) {
    for (std::int64_t i = 0; i < n; ++i)
      column[static_cast<std::size_t>(i)] = z[i * latent_dim + l];
    latent_labels[static_cast<std::size_t>(l)] =
        discretize_equal_width(column, spec.n_bins);
  }
  std::vector<std::vector<std::int64_t>> factor_labels;
  factor_labels.reserve(varying.size());
  for (std::int64_t k : varying) {
    std::vector<std::int64_t> series(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
      series[static_cast<std::size_t>(i)] =
          factors[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    factor_labels.push_back(std::move(series));
  }

  const MIProfile profile = mi_profile(latent_labels, factor_labels);
  return which == MetricKind::mig ? mig(profile) : modularity(profile);
}

}  // namespace

LocalMetricResult local_metric(const Embedder& embed, const Generator& gen,
                               const FactorSchema& schema,
                               const LocalSampleSpec& spec, MetricKind which) {
  detail::warm_allocator();
  spec.validate();
  if (!embed || !gen)
    throw contract_error("local_metric: embedder and generator are required");
  LocalMetricResult out;
  out.per_repeat.reserve(static_cast<std::size_t>(spec.n_repeats));
  for (std::int64_t r = 0; r < spec.n_repeats; ++r) {
    Rng rng = substream(spec.seed, "local-repeat", static_cast<std::uint64_t>(r));
    out.per_repeat.push_back(
        one_local_sample(embed, gen, schema, spec, which, rng));
  }
  double sum = 0;
  for (double v : out.per_repeat) sum += v;
  out.mean = sum / static_cast<double>(out.per_repeat.size());
  return out;
}

Embedder vae_embedder(const Vae& model) {
  // Owns a copy so the embedder cannot dangle.
  auto owned = std::make_shared<Vae>(model);
  return [owned](const Tensor& images) {
    return representation(*owned, images);
  };
}

Generator dots_generator(const DotsSpec& spec) {
  spec.validate();
  return [spec](const FactorVector& f) { return render_three_dots(spec, f); };
}

std::vector<MetricCsvRow> metric_rows(const std::string& model_id,
                                      std::uint64_t seed, MetricKind which,
                                      double rho,
                                      const LocalMetricResult& result) {
  std::vector<MetricCsvRow> rows;
  rows.reserve(result.per_repeat.size() + 1);
  const std::string name = metric_kind_name(which);
  for (std::size_t r = 0; r < result.per_repeat.size(); ++r)
    rows.push_back({model_id, seed, name, rho, static_cast<std::int64_t>(r),
                    result.per_repeat[r]});
  rows.push_back({model_id, seed, name, rho, -1, result.mean});
  return rows;
}

std::string format_metric_row(const MetricCsvRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%llu,%s,%.9g,%lld,%.9g",
                row.model_id.c_str(),
                static_cast<unsigned long long>(row.seed), row.metric.c_str(),
                row.rho, static_cast<long long>(row.repeat), row.value);
  return buf;
}

void write_metric_csv(const std::filesystem::path& path,
                      const std::vector<MetricCsvRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out << kMetricCsvHeader << '\n';
  for (const auto& r : rows) out << format_metric_row(r) << '\n';
  if (!out) throw io_error("write failed: " + path.string());
}

}  // namespace jl1
