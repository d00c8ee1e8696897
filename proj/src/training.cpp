#include "jl1/training.hpp"

#include <chrono>
#include <span>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "jl1/errors.hpp"
#include "jl1/rng.hpp"
#include "jl1/tape.hpp"

namespace jl1 {

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::betavae: return "betavae";
    case ModelKind::jl1vae: return "jl1vae";
    case ModelKind::jl2vae: return "jl2vae";
  }
  throw contract_error("model_kind_name: bad enum value");
}

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "betavae") return ModelKind::betavae;
  if (name == "jl1vae") return ModelKind::jl1vae;
  if (name == "jl2vae") return ModelKind::jl2vae;
  throw contract_error("unknown model kind '" + name +
                       "' (choices: betavae, jl1vae, jl2vae)");
}

void TrainConfig::validate() const {
  if (total_batches <= 0) throw contract_error("total_batches must be positive");
  if (anneal_batches <= 0)
    throw contract_error("anneal_batches must be positive");
  if (anneal_batches > total_batches)
    throw contract_error("anneal_batches must not exceed total_batches");
  if (batch_size <= 0) throw contract_error("batch_size must be positive");
  if (latent_dim <= 0) throw contract_error("latent_dim must be positive");
  if (checkpoint_every <= 0)
    throw contract_error("checkpoint_every must be positive");
  if (log_every <= 0) throw contract_error("log_every must be positive");
  if (!(lr > 0)) throw contract_error("lr must be positive");
  if (!(fd_epsilon > 0)) throw contract_error("fd_epsilon must be positive");
  if (!(beta_final >= 0)) throw contract_error("beta must be non-negative");
  if (!(gamma_final >= 0)) throw contract_error("gamma must be non-negative");
  if (model == ModelKind::betavae && gamma_final != 0)
    throw contract_error("betavae has no Jacobian penalty; gamma must be 0");
  dots.validate();
}

JacNorm TrainConfig::jac_norm() const {
  switch (model) {
    case ModelKind::betavae: return JacNorm::none;
    case ModelKind::jl1vae: return JacNorm::l1;
    case ModelKind::jl2vae: return JacNorm::l2;
  }
  throw contract_error("jac_norm: bad enum value");
}

double anneal_linear(std::int64_t batch_idx, double final_value,
                     std::int64_t anneal_batches) {
  if (batch_idx < 0) throw contract_error("anneal_linear: negative batch index");
  if (anneal_batches <= 0)
    throw contract_error("anneal_linear: anneal_batches must be positive");
  const double frac = static_cast<double>(batch_idx) /
                      static_cast<double>(anneal_batches);
  return final_value * std::min(1.0, frac);
}

LossConfig TrainConfig::loss_at(std::int64_t batch_idx) const {
  LossConfig lc;
  lc.beta = anneal_linear(batch_idx, beta_final, anneal_batches);
  lc.gamma = anneal_linear(batch_idx, gamma_final, anneal_batches);
  lc.jac_norm = jac_norm();
  lc.fd_epsilon = fd_epsilon;
  return lc;
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{
      {"model", model_kind_name(model)},
      {"beta", beta_final},
      {"gamma", gamma_final},
      {"total_batches", total_batches},
      {"anneal_batches", anneal_batches},
      {"batch_size", batch_size},
      {"lr", lr},
      {"latent_dim", latent_dim},
      {"fd_epsilon", fd_epsilon},
      {"seed", seed},
      {"checkpoint_every", checkpoint_every},
      {"log_every", log_every},
      {"dots",
       {{"size", dots.size},
        {"positions", dots.positions},
        {"radius", dots.radius},
        {"cache_seed", dots_cache_seed}}},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.model = model_kind_from_name(j.at("model").get<std::string>());
    cfg.beta_final = j.at("beta").get<double>();
    cfg.gamma_final = j.at("gamma").get<double>();
    cfg.total_batches = j.at("total_batches").get<std::int64_t>();
    cfg.anneal_batches = j.at("anneal_batches").get<std::int64_t>();
    cfg.batch_size = j.at("batch_size").get<std::int64_t>();
    cfg.lr = j.at("lr").get<double>();
    cfg.latent_dim = j.at("latent_dim").get<std::int64_t>();
    cfg.fd_epsilon = j.at("fd_epsilon").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
    cfg.log_every = j.at("log_every").get<std::int64_t>();
    const auto& d = j.at("dots");
    cfg.dots.size = d.at("size").get<std::int64_t>();
    cfg.dots.positions = d.at("positions").get<std::int64_t>();
    cfg.dots.radius = d.at("radius").get<double>();
    cfg.dots_cache_seed = d.at("cache_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed train config document: ") +
                       e.what());
  }
  cfg.validate();
  return cfg;
}

std::string format_run_row(const RunRow& row) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.3f",
                static_cast<long long>(row.batch), row.total, row.recon,
                row.kl, row.jac, row.seconds);
  return buf;
}

void write_run_csv(const std::filesystem::path& path,
                   const std::vector<RunRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path.string());
  out << kRunCsvHeader << '\n';
  for (const auto& r : rows) out << format_run_row(r) << '\n';
  if (!out) throw io_error("write failed: " + path.string());
}

TrainOutcome train(const TrainConfig& cfg, const DatasetCache& data,
                   const TrainHooks& hooks, std::optional<TrainStart> start) {
  detail::warm_allocator();
  cfg.validate();
  if (data.count <= 0) throw contract_error("train: empty dataset cache");
  if (data.height != data.width)
    throw dimension_error("train: dataset images must be square");

  VaeConfig vcfg;
  vcfg.image_size = data.height;
  vcfg.channels = data.channels;
  vcfg.latent_dim = cfg.latent_dim;
  vcfg.validate();

  Vae model = start ? std::move(start->model) : Vae::create(vcfg, cfg.seed);
  AdamState adam = start ? std::move(start->adam)
                         : AdamState::init(model.params,
                                           static_cast<float>(cfg.lr));
  TrainOutcome out{std::move(model), std::move(adam), {}};
  const std::int64_t start_batch = start ? start->batch : 0;
  if (start_batch < 0 || start_batch > cfg.total_batches)
    throw contract_error("train: resume point outside the schedule");
  if (out.model.cfg.image_size != vcfg.image_size ||
      out.model.cfg.channels != vcfg.channels ||
      out.model.cfg.latent_dim != vcfg.latent_dim)
    throw contract_error("train: resumed model does not match the dataset");
  if (out.adam.m.size() != out.model.params.trainable_count())
    throw contract_error("train: optimizer state does not match the model");

  const auto t0 = std::chrono::steady_clock::now();
  for (std::int64_t b = start_batch; b < cfg.total_batches; ++b) {
    const LossConfig lc = cfg.loss_at(b);
    Rng brng = substream(cfg.seed, "batch", static_cast<std::uint64_t>(b));
    Tensor x = sample_batch(data, cfg.batch_size, brng);
    Rng nrng = substream(cfg.seed, "noise", static_cast<std::uint64_t>(b));
    Tensor noise = Tensor::zeros({cfg.batch_size, cfg.latent_dim});
    nrng.fill_normal(std::span<float>(noise.data));

    LossParts parts;
    try {
      Tape tape;
      out.model.params.watch_all(tape);
      auto res = jl1_loss<float>(&tape, out.model, x, noise, lc);
      parts = res.parts;
      tape.backward(res.objective.node);
      auto grads = collect_grads(out.model.params, tape);
      adam_step(out.model.params, out.adam, grads);
    } catch (const numeric_error& e) {
      throw numeric_error(
          "training aborted at batch " + std::to_string(b) + " (beta=" +
          std::to_string(lc.beta) + ", gamma=" + std::to_string(lc.gamma) +
          "): " + e.what() +
          "; non-finite values at this stage indicate model collapse -- "
          "a smaller gamma or a longer anneal window avoids it");
    }

    if (b % cfg.log_every == 0 || b + 1 == cfg.total_batches) {
      const std::chrono::duration<double> dt =
          std::chrono::steady_clock::now() - t0;
      RunRow row{b, parts.total, parts.recon, lc.beta * parts.kl,
                 lc.gamma * parts.jac, dt.count()};
      out.log.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
    }
    const std::int64_t done = b + 1;
    if (hooks.on_checkpoint && done % cfg.checkpoint_every == 0 &&
        done != cfg.total_batches)
      hooks.on_checkpoint(out.model, out.adam, done);
  }
  return out;
}

void save_train_checkpoint(const std::filesystem::path& path, const Vae& model,
                           const AdamState& adam, const TrainConfig& cfg,
                           std::int64_t step) {
  if (step < 0 || step > cfg.total_batches)
    throw contract_error("save_train_checkpoint: step outside the schedule");
  nlohmann::json extra{{"train", cfg.to_json()}, {"step", step}};
  save_vae_checkpoint(path, model, &adam, std::move(extra));
}

LoadedTrainCheckpoint load_train_checkpoint(
    const std::filesystem::path& path) {
  LoadedVae lv = load_vae_checkpoint(path);
  if (!lv.meta.contains("train") || !lv.meta.contains("step"))
    throw format_error("checkpoint carries no training metadata: " +
                       path.string());
  if (!lv.adam)
    throw format_error("checkpoint carries no optimizer state: " +
                       path.string());
  LoadedTrainCheckpoint out{std::move(lv.model), std::move(*lv.adam),
                            TrainConfig::from_json(lv.meta.at("train")), 0};
  try {
    out.step = lv.meta.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("malformed checkpoint step: ") + e.what());
  }
  if (out.step < 0 || out.step > out.config.total_batches)
    throw format_error("checkpoint step outside its own schedule");
  if (out.model.cfg.latent_dim != out.config.latent_dim)
    throw format_error("checkpoint latent size disagrees with its config");
  return out;
}

}  // namespace jl1
