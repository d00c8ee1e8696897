#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "jl1/pgm.hpp"
#include "jl1/rng.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

enum class LinearKind { pca, ica };

// A linear component model over flattened patches. Rows of `components`
// are directions in pixel space: for PCA the top-k right singular
// vectors of the centered data (variance-ordered, orthonormal), for
// FastICA the unmixing filters composed with the whitening transform.
// Every row is sign-canonicalized so its largest-magnitude entry is
// positive.
struct LinearModel {
  LinearKind kind = LinearKind::pca;
  std::int64_t dim = 0;  // D, pixels per patch
  std::int64_t k = 0;    // component count
  std::vector<double> mean;        // [D]
  std::vector<double> components;  // [K x D] row-major
  std::vector<double> whitening;   // [K x D] PCA-whitening rows, ica only
  std::vector<double> explained;   // [K] covariance eigenvalues, descending
  bool converged = true;  // ica: fixed point reached within max_iter
};

// Principal components of row-major patches [N, D] via thin SVD of the
// mean-centered data. Requires 1 <= k <= min(N, D) and N > k.
LinearModel pca_fit(const TensorT<double>& data, std::int64_t k);

// FastICA: center, PCA-whiten to k dimensions, then the symmetric
// fixed-point iteration with the tanh contrast,
//   W <- E[g(WX) X^T] - diag(E[g'(WX)]) W,
// re-orthonormalized each step by W <- (W W^T)^{-1/2} W, stopping when
// max_i |1 - |<w_i_new, w_i_old>|| < tol. If max_iter passes without
// convergence the partial result is returned with converged = false.
LinearModel fastica_fit(const TensorT<double>& data, std::int64_t k, Rng& rng,
                        std::int64_t max_iter = 200, double tol = 1e-4);

// Projects patches onto the model: (data - mean) * components^T, [N, K].
TensorT<double> project(const LinearModel& m, const TensorT<double>& data);

// Maps patches through the k-dimensional PCA subspace and back, [N, D].
TensorT<double> pca_reconstruct(const LinearModel& m,
                                const TensorT<double>& data);

// Writes component-000.pgm .. component-<k-1>.pgm under out_dir, each
// row reshaped to height x width and rendered through signed_gray with
// one shared scale (the max |entry| over all components). Returns the
// scale used.
double export_components(const LinearModel& m, std::int64_t height,
                         std::int64_t width,
                         const std::filesystem::path& out_dir);

// Serialization: the same container format as VAE checkpoints (float32
// payload), round-tripping kind/dim/k/converged through the metadata.
void save_linear_model(const std::filesystem::path& path,
                       const LinearModel& m);
LinearModel load_linear_model(const std::filesystem::path& path);

// Every crop x crop window at the given stride over every .pgm file
// directly under dir (files visited in filename order), pixels scaled
// to [0, 1]; returns [N, crop*crop]. Images smaller than the window
// contribute nothing; zero total crops is a contract_error.
TensorT<double> crops_from_pgm_dir(const std::filesystem::path& dir,
                                   std::int64_t crop, std::int64_t stride);

}  // namespace jl1
