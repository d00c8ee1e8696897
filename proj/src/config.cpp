#include "jl1/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string_view>
#include <vector>

#include "jl1/errors.hpp"

namespace jl1 {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
    s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size())
    throw format_error("config: key '" + std::string(key) +
                       "': cannot parse '" + std::string(value) + "'");
  return out;
}

struct KeySpec {
  const char* key;
  const char* deflt;  // nullptr marks the one required key
  const char* doc;
  std::function<void(ExperimentConfig&, std::string_view)> apply;
};

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      {"model", nullptr, "betavae | jl1vae | jl2vae",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.model = model_kind_from_name(std::string(v));
       }},
      {"beta", "4.0", "final KL weight after annealing",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.beta_final = parse_number<double>("beta", v);
       }},
      {"gamma", "0.0", "final Jacobian-penalty weight after annealing",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.gamma_final = parse_number<double>("gamma", v);
       }},
      {"total_batches", "30000", "optimizer steps in the run",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.total_batches = parse_number<std::int64_t>("total_batches", v);
       }},
      {"anneal_batches", "10000",
       "batches over which beta and gamma ramp linearly from 0",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.anneal_batches =
             parse_number<std::int64_t>("anneal_batches", v);
       }},
      {"batch_size", "32", "records per optimizer step",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.batch_size = parse_number<std::int64_t>("batch_size", v);
       }},
      {"lr", "1e-4", "Adam learning rate",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.lr = parse_number<double>("lr", v);
       }},
      {"latent_dim", "10", "latent dimensionality L",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.latent_dim = parse_number<std::int64_t>("latent_dim", v);
       }},
      {"fd_epsilon", "0.01",
       "finite-difference step for the decoder Jacobian",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.fd_epsilon = parse_number<double>("fd_epsilon", v);
       }},
      {"seed", "0", "root seed for init, noise, and batch sampling",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.seed = parse_number<std::uint64_t>("seed", v);
       }},
      {"checkpoint_every", "10000", "checkpoint cadence in batches",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.checkpoint_every =
             parse_number<std::int64_t>("checkpoint_every", v);
       }},
      {"log_every", "100", "run-CSV row cadence in batches",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.log_every = parse_number<std::int64_t>("log_every", v);
       }},
      {"dots.size", "64", "image side length in pixels",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.dots.size = parse_number<std::int64_t>("dots.size", v);
       }},
      {"dots.positions", "64", "grid positions per dot coordinate",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.dots.positions =
             parse_number<std::int64_t>("dots.positions", v);
       }},
      {"dots.radius", "3.0", "dot radius in pixels",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.dots.radius = parse_number<double>("dots.radius", v);
       }},
      {"dots.cache_seed", "0", "seed the training cache was generated with",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.dots_cache_seed =
             parse_number<std::uint64_t>("dots.cache_seed", v);
       }},
      {"eval.rho", "0.1", "local ball radius as a fraction of factor range",
       [](ExperimentConfig& c, std::string_view v) {
         c.eval.rho = parse_number<double>("eval.rho", v);
       }},
      {"eval.repeats", "20", "independent local samples per evaluation",
       [](ExperimentConfig& c, std::string_view v) {
         c.eval.n_repeats = parse_number<std::int64_t>("eval.repeats", v);
       }},
      {"eval.points", "10000", "factor vectors per local sample",
       [](ExperimentConfig& c, std::string_view v) {
         c.eval.n_points = parse_number<std::int64_t>("eval.points", v);
       }},
      {"eval.bins", "5", "equal-width bins for latent discretization",
       [](ExperimentConfig& c, std::string_view v) {
         c.eval.n_bins = parse_number<std::int64_t>("eval.bins", v);
       }},
      {"eval.seed", "0", "seed for the evaluation sampler",
       [](ExperimentConfig& c, std::string_view v) {
         c.eval.seed = parse_number<std::uint64_t>("eval.seed", v);
       }},
  };
  return table;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::int64_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line(raw);
    if (auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw format_error("config line " + std::to_string(lineno) +
                         ": expected 'key = value', got '" + std::string(line) +
                         "'");
    std::string key(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw format_error("config line " + std::to_string(lineno) +
                         ": empty key or value");
    if (!seen.insert(key).second)
      throw format_error("config line " + std::to_string(lineno) +
                         ": duplicate key '" + key + "'");
    const KeySpec* match = nullptr;
    for (const auto& spec : key_table())
      if (key == spec.key) {
        match = &spec;
        break;
      }
    if (!match)
      throw format_error("config line " + std::to_string(lineno) +
                         ": unknown key '" + key + "'");
    try {
      match->apply(cfg, value);
    } catch (const format_error&) {
      throw;
    } catch (const error& e) {
      throw format_error("config line " + std::to_string(lineno) + ": " +
                         e.what());
    }
  }
  if (!seen.count("model"))
    throw format_error("config: missing required key 'model'");
  cfg.train.validate();
  cfg.eval.validate();
  return cfg;
}

ExperimentConfig read_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

std::string experiment_config_reference() {
  std::ostringstream os;
  for (const auto& spec : key_table()) {
    os << "  " << spec.key << " = "
       << (spec.deflt ? spec.deflt : "(required)") << "\n      " << spec.doc
       << "\n";
  }
  return os.str();
}

}  // namespace jl1
