#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jl1/checkpoint.hpp"
#include "jl1/datasets.hpp"
#include "jl1/models.hpp"
#include "jl1/params.hpp"

namespace jl1 {

// The three trainable objectives: plain beta-VAE, and the two
// Jacobian-penalized variants (L1 and squared-L2 column norms).
enum class ModelKind { betavae, jl1vae, jl2vae };

std::string model_kind_name(ModelKind kind);
ModelKind model_kind_from_name(const std::string& name);

// Everything that defines one training run. A run is fully determined
// by this struct plus the dataset cache contents; one seed drives model
// init, noise draws, and batch sampling through named substreams, so
// adding or removing logging cannot perturb the trajectory.
struct TrainConfig {
  ModelKind model = ModelKind::betavae;
  double beta_final = 4.0;
  double gamma_final = 0.0;
  std::int64_t total_batches = 30000;
  std::int64_t anneal_batches = 10000;
  std::int64_t batch_size = 32;
  double lr = 1e-4;
  std::int64_t latent_dim = 10;
  double fd_epsilon = 0.01;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 10000;
  std::int64_t log_every = 100;
  // Generator behind the training cache (lets downstream tools render
  // records on demand); `dots_cache_seed` is the seed the cache was
  // built with, validated against the cache before training starts.
  DotsSpec dots;
  std::uint64_t dots_cache_seed = 0;

  void validate() const;
  JacNorm jac_norm() const;
  // Annealed loss weights for one batch index.
  LossConfig loss_at(std::int64_t batch_idx) const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear ramp from 0 at batch 0 to `final_value` at `anneal_batches`,
// constant afterwards.
double anneal_linear(std::int64_t batch_idx, double final_value,
                     std::int64_t anneal_batches);

// One logged training interval. `kl` and `jac` are the weighted
// contributions (beta and the annealed gamma already applied), so
// total = recon + kl + jac for every row.
struct RunRow {
  std::int64_t batch = 0;
  double total = 0;
  double recon = 0;
  double kl = 0;
  double jac = 0;
  double seconds = 0;
};

inline constexpr const char* kRunCsvHeader = "batch,total,recon,kl,jac,seconds";
std::string format_run_row(const RunRow& row);
void write_run_csv(const std::filesystem::path& path,
                   const std::vector<RunRow>& rows);

// Optional per-event callbacks; both may be empty. `on_checkpoint`
// fires at the configured cadence with the number of completed batches.
struct TrainHooks {
  std::function<void(const RunRow&)> on_log;
  std::function<void(const Vae&, const AdamState&, std::int64_t done)>
      on_checkpoint;
};

// Resume point: parameters, optimizer state, and the number of batches
// already completed.
struct TrainStart {
  Vae model;
  AdamState adam;
  std::int64_t batch = 0;
};

struct TrainOutcome {
  Vae model;
  AdamState adam;
  std::vector<RunRow> log;
};

// Runs Adam on the configured objective for cfg.total_batches batches
// (or the remainder when resuming). Throws numeric_error with a
// model-collapse diagnostic if any batch produces a non-finite value.
TrainOutcome train(const TrainConfig& cfg, const DatasetCache& data,
                   const TrainHooks& hooks = {},
                   std::optional<TrainStart> start = std::nullopt);

// Checkpoints carry parameters, Adam moments, the config, and the
// number of completed batches; save -> load -> save is byte-identical.
void save_train_checkpoint(const std::filesystem::path& path, const Vae& model,
                           const AdamState& adam, const TrainConfig& cfg,
                           std::int64_t step);

struct LoadedTrainCheckpoint {
  Vae model;
  AdamState adam;
  TrainConfig config;
  std::int64_t step = 0;
};

LoadedTrainCheckpoint load_train_checkpoint(const std::filesystem::path& path);

}  // namespace jl1
