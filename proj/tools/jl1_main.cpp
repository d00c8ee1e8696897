// jl1: one multi-command binary for the whole experiment pipeline:
// dataset generation, training, local disentanglement evaluation,
// Jacobian-column export, and the PCA/FastICA baselines.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "jl1/baselines.hpp"
#include "jl1/config.hpp"
#include "jl1/datasets.hpp"
#include "jl1/errors.hpp"
#include "jl1/metrics.hpp"
#include "jl1/models.hpp"
#include "jl1/pgm.hpp"
#include "jl1/training.hpp"

namespace fs = std::filesystem;
using namespace jl1;

namespace {

// The cache carries no provenance header, so before a long run prove it
// was built by this config's generator: geometry, schema, and a few
// records regenerated from (dots, cache_seed) must all agree.
void check_cache_matches(const DatasetCache& data, const TrainConfig& cfg,
                         const fs::path& cache_path) {
  const auto complain = [&](const std::string& what) {
    throw contract_error(cache_path.string() + ": " + what +
                         "; this cache was not built with the configured "
                         "dots parameters and dots.cache_seed");
  };
  if (data.channels != 1 || data.height != cfg.dots.size ||
      data.width != cfg.dots.size)
    complain("geometry mismatch");
  FactorSchema want = dots_schema(cfg.dots.positions);
  // the cache file stores cardinalities, not names
  if (data.schema.cardinalities != want.cardinalities)
    complain("factor schema mismatch");
  for (std::int64_t i : {std::int64_t{0}, data.count / 2, data.count - 1}) {
    if (data.factor_vector(i) !=
        dots_cache_factors(cfg.dots, cfg.dots_cache_seed, i))
      complain("record " + std::to_string(i) + " factors do not regenerate");
    Tensor img = render_three_dots(cfg.dots, data.factor_vector(i));
    for (std::int64_t p = 0; p < img.numel(); ++p) {
      auto want_px = static_cast<std::uint8_t>(
          std::lround(255.0f * img[p]));
      if (data.pixels[static_cast<std::size_t>(i * data.pixels_per_image() +
                                               p)] != want_px)
        complain("record " + std::to_string(i) + " pixels do not regenerate");
    }
  }
}

int cmd_gen_dots(const fs::path& out, std::int64_t count, std::int64_t size,
                 std::int64_t positions, double radius, std::uint64_t seed) {
  DotsSpec spec{size, positions, radius};
  spec.validate();
  DatasetCache cache = build_dots_cache(spec, count, seed);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_cache(out, cache);
  std::printf("wrote %lld %lldx%lld records to %s\n",
              static_cast<long long>(cache.count),
              static_cast<long long>(size), static_cast<long long>(size),
              out.string().c_str());
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& data_path,
              const fs::path& out_dir, bool force, bool resume) {
  ExperimentConfig cfg = read_experiment_config(config_path);
  DatasetCache data = read_cache(data_path);
  check_cache_matches(data, cfg.train, data_path);

  fs::create_directories(out_dir);
  const fs::path final_path = out_dir / "final.jl1v";
  if (fs::exists(final_path) && !force && !resume)
    throw contract_error(final_path.string() +
                         " already exists; pass --force to overwrite");

  std::optional<TrainStart> start;
  if (resume) {
    std::int64_t best = -1;
    fs::path best_path;
    for (const auto& e : fs::directory_iterator(out_dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("ckpt-", 0) != 0 || e.path().extension() != ".jl1v")
        continue;
      std::int64_t step = std::stoll(name.substr(5));
      if (step > best) {
        best = step;
        best_path = e.path();
      }
    }
    if (best < 0)
      throw contract_error("--resume: no ckpt-*.jl1v under " +
                           out_dir.string());
    LoadedTrainCheckpoint loaded = load_train_checkpoint(best_path);
    if (loaded.config.to_json() != cfg.train.to_json())
      throw contract_error(best_path.string() +
                           ": checkpoint config differs from --config; "
                           "refusing to resume");
    std::printf("resuming from %s (batch %lld)\n", best_path.string().c_str(),
                static_cast<long long>(loaded.step));
    start = TrainStart{std::move(loaded.model), std::move(loaded.adam),
                       loaded.step};
  }

  TrainHooks hooks;
  hooks.on_checkpoint = [&](const Vae& model, const AdamState& adam,
                            std::int64_t done) {
    char name[48];
    std::snprintf(name, sizeof name, "ckpt-%lld.jl1v",
                  static_cast<long long>(done));
    save_train_checkpoint(out_dir / name, model, adam, cfg.train, done);
  };
  hooks.on_log = [&](const RunRow& r) {
    if (r.batch % cfg.train.checkpoint_every == 0 ||
        r.batch + 1 == cfg.train.total_batches)
      std::printf("batch %6lld  total %.4f  recon %.4f  kl %.4f  jac %.4f\n",
                  static_cast<long long>(r.batch), r.total, r.recon, r.kl,
                  r.jac);
  };

  TrainOutcome out = train(cfg.train, data, hooks, std::move(start));
  save_train_checkpoint(final_path, out.model, out.adam, cfg.train,
                        cfg.train.total_batches);
  write_run_csv(out_dir / "run.csv", out.log);
  std::printf("wrote %s\n", final_path.string().c_str());
  return 0;
}

int cmd_eval_local(const fs::path& ckpt, const std::string& rho_list,
                   std::int64_t repeats, std::int64_t points,
                   std::int64_t bins, const std::string& metric,
                   std::uint64_t seed, const fs::path& out) {
  LoadedTrainCheckpoint loaded = load_train_checkpoint(ckpt);
  const std::string model_id =
      model_kind_name(loaded.config.model) + "-s" +
      std::to_string(loaded.config.seed);
  MetricKind which = metric_kind_from_name(metric);
  FactorSchema schema = dots_schema(loaded.config.dots.positions);
  Generator gen = dots_generator(loaded.config.dots);
  Embedder embed = vae_embedder(loaded.model);

  std::vector<double> rhos;
  std::stringstream ss(rho_list);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    rhos.push_back(std::stod(tok));
  }
  if (rhos.empty()) throw contract_error("--rho: no values given");

  std::vector<MetricCsvRow> rows;
  for (double rho : rhos) {
    LocalSampleSpec spec;
    spec.rho = rho;
    spec.n_points = points;
    spec.n_repeats = repeats;
    spec.n_bins = bins;
    spec.seed = seed;
    spec.validate();
    LocalMetricResult res = local_metric(embed, gen, schema, spec, which);
    auto batch = metric_rows(model_id, loaded.config.seed, which, rho, res);
    rows.insert(rows.end(), batch.begin(), batch.end());
    std::printf("%s rho %.3g: mean %s %.6f\n", model_id.c_str(), rho,
                metric_kind_name(which).c_str(), res.mean);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_metric_csv(out, rows);
  return 0;
}

int cmd_export_jacobian(const fs::path& ckpt, std::int64_t image_index,
                        double epsilon, const fs::path& out_dir) {
  LoadedTrainCheckpoint loaded = load_train_checkpoint(ckpt);
  const DotsSpec& dots = loaded.config.dots;
  FactorVector factors =
      dots_cache_factors(dots, loaded.config.dots_cache_seed, image_index);
  Tensor img = render_three_dots(dots, factors);  // [1, S, S]
  Tensor batch({1, 1, dots.size, dots.size}, img.data);
  Tensor z = representation(loaded.model, batch);  // [1, L]

  const Vae& model = loaded.model;
  auto decode_fn = [&model](Tape* t, const Tensor& zz) {
    return model.decode(t, zz);
  };
  Tensor jac = fd_jacobian<float>(nullptr, decode_fn, z,
                                  static_cast<float>(epsilon));  // [1, L*P]
  const std::int64_t L = loaded.config.latent_dim;
  const std::int64_t P = jac.numel() / L;

  double scale = 0.0;
  for (std::int64_t i = 0; i < jac.numel(); ++i)
    scale = std::max(scale, std::abs(static_cast<double>(jac[i])));

  fs::create_directories(out_dir);
  std::vector<std::pair<double, std::int64_t>> norms;  // (-norm, latent)
  std::vector<double> column(static_cast<std::size_t>(P));
  for (std::int64_t i = 0; i < L; ++i) {
    double sq = 0;
    for (std::int64_t p = 0; p < P; ++p) {
      column[static_cast<std::size_t>(p)] =
          static_cast<double>(jac[i * P + p]);
      sq += column[static_cast<std::size_t>(p)] *
            column[static_cast<std::size_t>(p)];
    }
    norms.push_back({-std::sqrt(sq), i});
    char name[48];
    std::snprintf(name, sizeof name, "column-%03lld.pgm",
                  static_cast<long long>(i));
    write_pgm(out_dir / name,
              signed_gray_image(column.data(), dots.size, dots.size, scale));
  }
  std::sort(norms.begin(), norms.end());
  std::ofstream index(out_dir / "index.txt", std::ios::binary);
  if (!index) throw io_error("cannot open index.txt under " + out_dir.string());
  for (const auto& [neg, latent] : norms) {
    char line[64];
    std::snprintf(line, sizeof line, "%lld %.9g\n",
                  static_cast<long long>(latent), -neg);
    index << line;
  }
  std::printf("wrote %lld Jacobian columns to %s\n", static_cast<long long>(L),
              out_dir.string().c_str());
  return 0;
}

int cmd_baseline(const std::string& method, std::int64_t components,
                 const fs::path& data_path, const fs::path& out_dir,
                 std::int64_t crop, std::int64_t stride, std::uint64_t seed,
                 std::int64_t max_iter, double tol) {
  TensorT<double> mat;
  std::int64_t height = 0, width = 0;
  if (fs::is_directory(data_path)) {
    mat = crops_from_pgm_dir(data_path, crop, stride);
    height = crop;
    width = crop;
  } else {
    DatasetCache cache = read_cache(data_path);
    if (cache.channels != 1)
      throw contract_error("baseline: only single-channel caches supported");
    height = cache.height;
    width = cache.width;
    const std::int64_t d = cache.pixels_per_image();
    mat = TensorT<double>::zeros({cache.count, d});
    for (std::int64_t i = 0; i < cache.count * d; ++i)
      mat[i] = cache.pixels[static_cast<std::size_t>(i)] / 255.0;
  }
  std::printf("fitting %s on %lld patches of %lldx%lld\n", method.c_str(),
              static_cast<long long>(mat.shape[0]),
              static_cast<long long>(height), static_cast<long long>(width));

  LinearModel model;
  if (method == "pca") {
    model = pca_fit(mat, components);
  } else {
    Rng rng(seed);
    model = fastica_fit(mat, components, rng, max_iter, tol);
    if (!model.converged)
      std::fprintf(stderr,
                   "jl1: warning: FastICA hit max-iter %lld before the "
                   "fixed point; result is partial\n",
                   static_cast<long long>(max_iter));
  }
  fs::create_directories(out_dir);
  export_components(model, height, width, out_dir);
  save_linear_model(out_dir / "model.jl1m", model);
  std::printf("wrote %lld components to %s\n",
              static_cast<long long>(model.k), out_dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"JL1-VAE laboratory: datasets, training, local metrics, "
               "Jacobian exports, linear baselines"};
  app.require_subcommand(1);

  // gen-dots ---------------------------------------------------------
  auto* gen = app.add_subcommand("gen-dots", "Generate a three-dots cache");
  fs::path gen_out;
  std::int64_t gen_count = 500000, gen_size = 64, gen_positions = 64;
  double gen_radius = 3.0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output cache file (.jldc)")->required();
  gen->add_option("--count", gen_count, "records to generate")
      ->capture_default_str();
  gen->add_option("--size", gen_size, "image side length")
      ->capture_default_str();
  gen->add_option("--positions", gen_positions, "grid positions per axis")
      ->capture_default_str();
  gen->add_option("--radius", gen_radius, "dot radius in pixels")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();

  // train ------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  fs::path tr_config, tr_data, tr_out;
  bool tr_force = false, tr_resume = false;
  tr->add_option("--config", tr_config, "experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "dataset cache (.jldc)")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_flag("--force", tr_force, "overwrite an existing final checkpoint");
  tr->add_flag("--resume", tr_resume,
               "continue from the newest ckpt-*.jl1v in --out");
  tr->footer("Config keys (key = value, # comments):\n" +
             experiment_config_reference());

  // eval-local -------------------------------------------------------
  auto* ev = app.add_subcommand("eval-local",
                                "Local disentanglement metric of a checkpoint");
  fs::path ev_ckpt, ev_out;
  std::string ev_rho = "0.1", ev_metric = "mig";
  std::int64_t ev_repeats = 20, ev_points = 10000, ev_bins = 5;
  std::uint64_t ev_seed = 0;
  ev->add_option("--ckpt", ev_ckpt, "training checkpoint (.jl1v)")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--rho", ev_rho, "comma-separated ball radii in (0,1]")
      ->capture_default_str();
  ev->add_option("--repeats", ev_repeats, "local samples per rho")
      ->capture_default_str();
  ev->add_option("--points", ev_points, "factor vectors per sample")
      ->capture_default_str();
  ev->add_option("--bins", ev_bins, "latent discretization bins")
      ->capture_default_str();
  ev->add_option("--metric", ev_metric, "which metric to compute")
      ->check(CLI::IsMember({"mig", "modularity"}))
      ->capture_default_str();
  ev->add_option("--seed", ev_seed, "evaluation sampler seed")
      ->capture_default_str();
  ev->add_option("--out", ev_out, "metrics CSV path")->required();

  // export-jacobian ---------------------------------------------------
  auto* ex = app.add_subcommand(
      "export-jacobian", "Decoder Jacobian columns of one embedded image");
  fs::path ex_ckpt, ex_out;
  std::int64_t ex_index = 0;
  double ex_eps = 0.01;
  ex->add_option("--ckpt", ex_ckpt, "training checkpoint (.jl1v)")
      ->required()
      ->check(CLI::ExistingFile);
  ex->add_option("--image-index", ex_index,
                 "cache record index to embed and differentiate")
      ->capture_default_str();
  ex->add_option("--epsilon", ex_eps, "finite-difference step")
      ->capture_default_str();
  ex->add_option("--out", ex_out, "output directory")->required();

  // baseline ----------------------------------------------------------
  auto* bl = app.add_subcommand("baseline", "PCA / FastICA on image patches");
  std::string bl_method;
  std::int64_t bl_components = 100, bl_crop = 16, bl_stride = 8,
               bl_max_iter = 200;
  double bl_tol = 1e-4;
  std::uint64_t bl_seed = 0;
  fs::path bl_data, bl_out;
  bl->add_option("--method", bl_method, "fitting method")
      ->required()
      ->check(CLI::IsMember({"pca", "ica"}));
  bl->add_option("--components", bl_components, "components to fit")
      ->capture_default_str();
  bl->add_option("--data", bl_data,
                 "dataset cache (.jldc) or a directory of .pgm images")
      ->required()
      ->check(CLI::ExistingPath);
  bl->add_option("--out", bl_out, "output directory")->required();
  bl->add_option("--crop", bl_crop, "crop size for .pgm directories")
      ->capture_default_str();
  bl->add_option("--stride", bl_stride, "crop stride for .pgm directories")
      ->capture_default_str();
  bl->add_option("--seed", bl_seed, "FastICA start seed")
      ->capture_default_str();
  bl->add_option("--max-iter", bl_max_iter, "FastICA iteration cap")
      ->capture_default_str();
  bl->add_option("--tol", bl_tol, "FastICA convergence tolerance")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_gen_dots(gen_out, gen_count, gen_size, gen_positions,
                          gen_radius, gen_seed);
    if (tr->parsed())
      return cmd_train(tr_config, tr_data, tr_out, tr_force, tr_resume);
    if (ev->parsed())
      return cmd_eval_local(ev_ckpt, ev_rho, ev_repeats, ev_points, ev_bins,
                            ev_metric, ev_seed, ev_out);
    if (ex->parsed())
      return cmd_export_jacobian(ex_ckpt, ex_index, ex_eps, ex_out);
    if (bl->parsed())
      return cmd_baseline(bl_method, bl_components, bl_data, bl_out, bl_crop,
                          bl_stride, bl_seed, bl_max_iter, bl_tol);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const jl1::error& e) {
    std::fprintf(stderr, "jl1: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "jl1: unexpected failure: %s\n", e.what());
    return 2;
  }
  return 0;
}
