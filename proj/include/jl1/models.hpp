#pragma once

// Convolutional VAE architectures (64x64 and 16x16 variants), the
// beta-VAE / Jacobian-regularized losses, and the finite-difference
// generator Jacobian. Everything is templated on the scalar type so the
// same code runs in float32 for training and float64 for gradient
// checking.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include "jl1/ops.hpp"
#include "jl1/params.hpp"
#include "jl1/rng.hpp"
#include "jl1/tape.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

enum class JacNorm { none, l1, l2 };

inline const char* jac_norm_name(JacNorm n) {
  switch (n) {
    case JacNorm::none: return "none";
    case JacNorm::l1: return "l1";
    case JacNorm::l2: return "l2";
  }
  return "none";
}

inline JacNorm jac_norm_from_name(const std::string& s) {
  if (s == "none") return JacNorm::none;
  if (s == "l1") return JacNorm::l1;
  if (s == "l2") return JacNorm::l2;
  throw contract_error("unknown jac_norm: " + s);
}

struct LossConfig {
  double beta = 4.0;
  double gamma = 0.0;
  JacNorm jac_norm = JacNorm::none;
  double fd_epsilon = 0.01;
  // Evaluate the Jacobian penalty at the posterior mean h(x) instead of
  // the sampled z. Off by default; kept as an explicitly untested
  // variant of the objective.
  bool jac_at_mean = false;

  void validate() const {
    if (beta < 0) throw contract_error("LossConfig: beta must be >= 0");
    if (gamma < 0) throw contract_error("LossConfig: gamma must be >= 0");
    if (!(fd_epsilon > 0))
      throw contract_error("LossConfig: fd_epsilon must be > 0");
    if (jac_norm == JacNorm::none && gamma != 0)
      throw contract_error("LossConfig: jac_norm=none forces gamma=0");
  }
};

struct VaeConfig {
  std::int64_t image_size = 64;  // 16 or 64
  std::int64_t channels = 1;
  std::int64_t latent_dim = 10;

  void validate() const {
    if (image_size != 16 && image_size != 64)
      throw contract_error("VaeConfig: image_size must be 16 or 64");
    if (channels < 1) throw contract_error("VaeConfig: channels must be >= 1");
    if (latent_dim < 1)
      throw contract_error("VaeConfig: latent_dim must be >= 1");
  }
};

namespace detail {

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in). The init stream is
// derived per parameter name, so values do not depend on creation order.
template <typename T>
TensorT<T> he_uniform(Shape shape, std::int64_t fan_in, std::uint64_t seed,
                      const std::string& name) {
  Rng rng = substream(seed, "init." + name);
  auto t = TensorT<T>::zeros(std::move(shape));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.next_range(-bound, bound));
  return t;
}

template <typename T>
void add_conv(ModelParamsT<T>& p, std::uint64_t seed, const std::string& name,
              std::int64_t c_out, std::int64_t c_in, std::int64_t k) {
  p.add(name + ".w",
        he_uniform<T>({c_out, c_in, k, k}, c_in * k * k, seed, name + ".w"));
  p.add(name + ".b", TensorT<T>::zeros({c_out}));
}

template <typename T>
void add_convt(ModelParamsT<T>& p, std::uint64_t seed, const std::string& name,
               std::int64_t c_in, std::int64_t c_out, std::int64_t k) {
  p.add(name + ".w",
        he_uniform<T>({c_in, c_out, k, k}, c_in * k * k, seed, name + ".w"));
  p.add(name + ".b", TensorT<T>::zeros({c_out}));
}

template <typename T>
void add_fc(ModelParamsT<T>& p, std::uint64_t seed, const std::string& name,
            std::int64_t in, std::int64_t out) {
  p.add(name + ".w", he_uniform<T>({in, out}, in, seed, name + ".w"));
  p.add(name + ".b", TensorT<T>::zeros({out}));
}

}  // namespace detail

// Convolutional VAE. 64x64 layout: 4 stride-2 conv blocks (k4), FC 256
// trunk, two L-dim heads; decoder mirrors it with transposed convs.
// 16x16 layout: 2 stride-2 conv blocks (k3), FC 128 trunk; decoder uses
// two stride-2 transposed convs (output-padded to double exactly) and a
// stride-1 finisher. Sigmoid output in both.
template <typename T>
struct VaeT {
  VaeConfig cfg;
  ModelParamsT<T> params;

  static VaeT create(const VaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VaeT m;
    m.cfg = cfg;
    auto& p = m.params;
    const std::int64_t L = cfg.latent_dim, C = cfg.channels;
    if (cfg.image_size == 64) {
      detail::add_conv(p, seed, "enc.conv1", 32, C, 4);
      detail::add_conv(p, seed, "enc.conv2", 32, 32, 4);
      detail::add_conv(p, seed, "enc.conv3", 64, 32, 4);
      detail::add_conv(p, seed, "enc.conv4", 64, 64, 4);
      detail::add_fc(p, seed, "enc.fc", 64 * 4 * 4, 256);
      detail::add_fc(p, seed, "enc.mu", 256, L);
      detail::add_fc(p, seed, "enc.logvar", 256, L);
      detail::add_fc(p, seed, "dec.fc1", L, 256);
      detail::add_fc(p, seed, "dec.fc2", 256, 64 * 4 * 4);
      detail::add_convt(p, seed, "dec.convt1", 64, 64, 4);
      detail::add_convt(p, seed, "dec.convt2", 64, 32, 4);
      detail::add_convt(p, seed, "dec.convt3", 32, 32, 4);
      detail::add_convt(p, seed, "dec.convt4", 32, C, 4);
    } else {
      detail::add_conv(p, seed, "enc.conv1", 64, C, 3);
      detail::add_conv(p, seed, "enc.conv2", 128, 64, 3);
      detail::add_fc(p, seed, "enc.fc", 128 * 4 * 4, 128);
      detail::add_fc(p, seed, "enc.mu", 128, L);
      detail::add_fc(p, seed, "enc.logvar", 128, L);
      detail::add_fc(p, seed, "dec.fc1", L, 128);
      detail::add_fc(p, seed, "dec.fc2", 128, 64 * 4 * 4);
      detail::add_convt(p, seed, "dec.convt1", 64, 64, 3);
      detail::add_convt(p, seed, "dec.convt2", 64, 32, 3);
      detail::add_convt(p, seed, "dec.convt3", 32, C, 3);
    }
    return m;
  }

  // x: [N, C, S, S] with pixels in [0,1] -> (mean [N,L], log_var [N,L]).
  // log_var comes back clamped to [-12, 12] so exp() stays finite.
  std::pair<TensorT<T>, TensorT<T>> encode(TapeT<T>* tape,
                                           const TensorT<T>& x) const {
    const std::int64_t S = cfg.image_size;
    if (x.rank() != 4 || x.shape[1] != cfg.channels || x.shape[2] != S ||
        x.shape[3] != S)
      throw dimension_error("encode: expected [N," +
                            std::to_string(cfg.channels) + "," +
                            std::to_string(S) + "," + std::to_string(S) +
                            "], got " + shape_str(x.shape));
    const std::int64_t n = x.shape[0];
    TensorT<T> h = x;
    if (S == 64) {
      h = conv2d_block(tape, h, at("enc.conv1.w"), at("enc.conv1.b"), 2, 1, Act::relu);
      h = conv2d_block(tape, h, at("enc.conv2.w"), at("enc.conv2.b"), 2, 1, Act::relu);
      h = conv2d_block(tape, h, at("enc.conv3.w"), at("enc.conv3.b"), 2, 1, Act::relu);
      h = conv2d_block(tape, h, at("enc.conv4.w"), at("enc.conv4.b"), 2, 1, Act::relu);
      h = reshape(tape, h, {n, 64 * 4 * 4});
    } else {
      h = conv2d_block(tape, h, at("enc.conv1.w"), at("enc.conv1.b"), 2, 1, Act::relu);
      h = conv2d_block(tape, h, at("enc.conv2.w"), at("enc.conv2.b"), 2, 1, Act::relu);
      h = reshape(tape, h, {n, 128 * 4 * 4});
    }
    h = relu(tape, add_row_bias(tape, matmul(tape, h, at("enc.fc.w")), at("enc.fc.b")));
    TensorT<T> mu = add_row_bias(tape, matmul(tape, h, at("enc.mu.w")), at("enc.mu.b"));
    TensorT<T> lv = add_row_bias(tape, matmul(tape, h, at("enc.logvar.w")), at("enc.logvar.b"));
    lv = clamp(tape, lv, T(-12), T(12));
    return {std::move(mu), std::move(lv)};
  }

  // z: [N, L] -> mean image [N, C, S, S], strictly inside (0,1).
  TensorT<T> decode(TapeT<T>* tape, const TensorT<T>& z) const {
    if (z.rank() != 2 || z.shape[1] != cfg.latent_dim)
      throw dimension_error("decode: expected [N," +
                            std::to_string(cfg.latent_dim) + "], got " +
                            shape_str(z.shape));
    const std::int64_t n = z.shape[0];
    TensorT<T> h = relu(tape, add_row_bias(tape, matmul(tape, z, at("dec.fc1.w")), at("dec.fc1.b")));
    h = relu(tape, add_row_bias(tape, matmul(tape, h, at("dec.fc2.w")), at("dec.fc2.b")));
    h = reshape(tape, h, {n, 64, 4, 4});
    if (cfg.image_size == 64) {
      h = conv_transpose2d_block(tape, h, at("dec.convt1.w"), at("dec.convt1.b"), 2, 1, 0, Act::relu);
      h = conv_transpose2d_block(tape, h, at("dec.convt2.w"), at("dec.convt2.b"), 2, 1, 0, Act::relu);
      h = conv_transpose2d_block(tape, h, at("dec.convt3.w"), at("dec.convt3.b"), 2, 1, 0, Act::relu);
      h = conv_transpose2d_block(tape, h, at("dec.convt4.w"), at("dec.convt4.b"), 2, 1, 0, Act::sigmoid);
    } else {
      h = conv_transpose2d_block(tape, h, at("dec.convt1.w"), at("dec.convt1.b"), 2, 1, 1, Act::relu);
      h = conv_transpose2d_block(tape, h, at("dec.convt2.w"), at("dec.convt2.b"), 2, 1, 1, Act::relu);
      h = conv_transpose2d_block(tape, h, at("dec.convt3.w"), at("dec.convt3.b"), 1, 1, 0, Act::sigmoid);
    }
    return h;
  }

  std::int64_t pixel_count() const {
    return cfg.channels * cfg.image_size * cfg.image_size;
  }

 private:
  const TensorT<T>& at(const std::string& name) const { return params.at(name); }
};

using Vae = VaeT<float>;

// z = mean + exp(0.5 * log_var) * noise, elementwise.
template <typename T>
TensorT<T> reparameterize(TapeT<T>* tape, const TensorT<T>& mean,
                          const TensorT<T>& log_var, const TensorT<T>& noise) {
  detail::check_same_shape("reparameterize", mean, log_var);
  detail::check_same_shape("reparameterize", mean, noise);
  TensorT<T> sigma = exp(tape, scale(tape, log_var, T(0.5)));
  return add(tape, mean, mul(tape, sigma, noise));
}

// Per-sample Bernoulli log likelihood: [N] with entry
// sum_pixels [x log m + (1-x) log(1-m)], m clamped to [1e-6, 1-1e-6].
template <typename T>
TensorT<T> bernoulli_log_likelihood(TapeT<T>* tape, const TensorT<T>& x,
                                    const TensorT<T>& x_mean) {
  detail::check_same_shape("bernoulli_log_likelihood", x, x_mean);
  TensorT<T> m = clamp(tape, x_mean, T(1e-6), T(1) - T(1e-6));
  // 1 - x as a constant (no gradient flows into the data)
  TensorT<T> one_minus_x = TensorT<T>::zeros(x.shape);
  for (std::int64_t i = 0; i < x.numel(); ++i) one_minus_x[i] = T(1) - x[i];
  TensorT<T> one_minus_m = add_scalar(tape, scale(tape, m, T(-1)), T(1));
  TensorT<T> ll = add(tape, mul(tape, x, log(tape, m)),
                      mul(tape, one_minus_x, log(tape, one_minus_m)));
  const std::int64_t n = x.shape[0];
  return reduce_sum_rows(tape, reshape(tape, ll, {n, x.numel() / n}));
}

// Per-sample KL( N(mu, diag(exp(log_var))) || N(0, I) ): [N] with entry
// 0.5 * sum_i (mu_i^2 + exp(log_var_i) - 1 - log_var_i). Non-negative.
template <typename T>
TensorT<T> kl_diag_gaussian(TapeT<T>* tape, const TensorT<T>& mean,
                            const TensorT<T>& log_var) {
  detail::check_same_shape("kl_diag_gaussian", mean, log_var);
  TensorT<T> inner =
      sub(tape, add(tape, exp(tape, log_var), mul(tape, mean, mean)),
          add_scalar(tape, log_var, T(1)));
  return scale(tape, reduce_sum_rows(tape, inner), T(0.5));
}

// Finite-difference generator Jacobian at each row of z. One batched
// forward of N*(L+1) decodes; column i of sample n sits at
// out[n, i*P:(i+1)*P] = (g(z_n + eps e_i) - g(z_n)) / eps. The result
// stays differentiable (through the decoder parameters and through z).
template <typename T, typename DecodeFn>
TensorT<T> fd_jacobian(TapeT<T>* tape, DecodeFn&& decode, const TensorT<T>& z,
                       T eps) {
  if (z.rank() != 2)
    throw dimension_error("fd_jacobian: z must be [N,L], got " +
                          shape_str(z.shape));
  if (!(eps > T(0))) throw contract_error("fd_jacobian: epsilon must be > 0");
  const std::int64_t n = z.shape[0], L = z.shape[1];
  // Constant offsets: row 0 of each group is untouched, row 1+i adds
  // eps to coordinate i.
  TensorT<T> offsets = TensorT<T>::zeros({n * (L + 1), L});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < L; ++i)
      offsets[(b * (L + 1) + 1 + i) * L + i] = eps;
  TensorT<T> zbig = add(tape, repeat_rows(tape, z, L + 1), offsets);
  TensorT<T> xbig = decode(tape, zbig);  // [N*(L+1), ...]
  const std::int64_t p = xbig.numel() / (n * (L + 1));
  TensorT<T> flat = reshape(tape, xbig, {n * (L + 1), p});
  return fd_columns(tape, flat, L, eps);
}

// Same estimator with the base decode g(z) supplied by the caller as
// base_flat [N, P]; only the L perturbed decodes run here. Used by the
// training objective, where the reconstruction term has already decoded
// the very same z.
template <typename T, typename DecodeFn>
TensorT<T> fd_jacobian_from_base(TapeT<T>* tape, DecodeFn&& decode,
                                 const TensorT<T>& z,
                                 const TensorT<T>& base_flat, T eps) {
  if (z.rank() != 2)
    throw dimension_error("fd_jacobian_from_base: z must be [N,L], got " +
                          shape_str(z.shape));
  if (!(eps > T(0)))
    throw contract_error("fd_jacobian_from_base: epsilon must be > 0");
  const std::int64_t n = z.shape[0], L = z.shape[1];
  if (base_flat.rank() != 2 || base_flat.shape[0] != n)
    throw dimension_error("fd_jacobian_from_base: base must be [N,P], got " +
                          shape_str(base_flat.shape));
  TensorT<T> offsets = TensorT<T>::zeros({n * L, L});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < L; ++i) offsets[(b * L + i) * L + i] = eps;
  TensorT<T> zpert = add(tape, repeat_rows(tape, z, L), offsets);
  TensorT<T> xpert = decode(tape, zpert);  // [N*L, ...]
  const std::int64_t p = xpert.numel() / (n * L);
  if (p != base_flat.shape[1])
    throw dimension_error("fd_jacobian_from_base: base width " +
                          std::to_string(base_flat.shape[1]) +
                          " does not match decoded pixel count " +
                          std::to_string(p));
  TensorT<T> flat = reshape(tape, xpert, {n * L, p});
  return fd_columns_from_base(tape, base_flat, flat, eps);
}

// Diagnostic byproducts of one loss evaluation (plain forward values).
struct LossParts {
  double total = 0;
  double recon = 0;  // negative Bernoulli log likelihood, batch mean
  double kl = 0;     // KL term, batch mean (unweighted)
  double jac = 0;    // Jacobian penalty, batch mean (unweighted)
};

template <typename T>
struct LossResult {
  TensorT<T> objective;  // scalar node: recon + beta*kl + gamma*jac
  LossParts parts;
};

// The training objective (to minimize):
//   mean_n [ -log p(x_n | z_n) ] + beta * mean_n KL_n + gamma * mean_n pen_n
// with z_n reparameterized from encode(x_n) and pen_n the L1 (or squared
// L2) norm of the FD generator Jacobian at z_n. gamma = 0 (or
// jac_norm = none) skips the Jacobian decodes entirely, so a beta-VAE
// step computes the exact same graph as a jl1vae step with gamma 0.
template <typename T>
LossResult<T> jl1_loss(TapeT<T>* tape, const VaeT<T>& model, const TensorT<T>& x,
                       const TensorT<T>& noise, const LossConfig& cfg) {
  cfg.validate();
  const std::int64_t n = x.shape[0];
  auto [mu, lv] = model.encode(tape, x);
  TensorT<T> z = reparameterize(tape, mu, lv, noise);
  TensorT<T> x_mean = model.decode(tape, z);

  TensorT<T> recon_rows = scale(tape, bernoulli_log_likelihood(tape, x, x_mean), T(-1));
  TensorT<T> kl_rows = kl_diag_gaussian(tape, mu, lv);
  const T inv_n = T(1) / static_cast<T>(n);
  TensorT<T> recon_mean = scale(tape, reduce_sum(tape, recon_rows), inv_n);
  TensorT<T> kl_mean = scale(tape, reduce_sum(tape, kl_rows), inv_n);

  LossResult<T> result;
  const bool with_jac = cfg.jac_norm != JacNorm::none && cfg.gamma != 0;
  if (with_jac) {
    auto decode_fn = [&model](TapeT<T>* t, const TensorT<T>& zz) {
      return model.decode(t, zz);
    };
    const T eps = static_cast<T>(cfg.fd_epsilon);
    // At the sampled z the reconstruction decode is the Jacobian base
    // decode, so share it instead of decoding z a second time.
    TensorT<T> jac =
        cfg.jac_at_mean
            ? fd_jacobian(tape, decode_fn, mu, eps)
            : fd_jacobian_from_base(
                  tape, decode_fn, z,
                  reshape(tape, x_mean, {n, x_mean.numel() / n}), eps);
    TensorT<T> pen_rows =
        cfg.jac_norm == JacNorm::l1
            ? reduce_sum_rows(tape, abs(tape, jac))
            : reduce_sum_rows(tape, mul(tape, jac, jac));
    TensorT<T> pen_mean = scale(tape, reduce_sum(tape, pen_rows), inv_n);
    result.objective =
        add(tape, recon_mean,
            add(tape, scale(tape, kl_mean, static_cast<T>(cfg.beta)),
                scale(tape, pen_mean, static_cast<T>(cfg.gamma))));
    result.parts.jac = static_cast<double>(pen_mean[0]);
  } else {
    result.objective =
        add(tape, recon_mean, scale(tape, kl_mean, static_cast<T>(cfg.beta)));
    result.parts.jac = 0.0;
  }
  result.parts.total = static_cast<double>(result.objective[0]);
  result.parts.recon = static_cast<double>(recon_mean[0]);
  result.parts.kl = static_cast<double>(kl_mean[0]);
  return result;
}

}  // namespace jl1
