#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "jl1/baselines.hpp"
#include "jl1/errors.hpp"
#include "jl1/pgm.hpp"
#include "jl1/rng.hpp"

using namespace jl1;
namespace fs = std::filesystem;

namespace {

using DTensor = TensorT<double>;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("jl1_base_" + name);
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

// Laplace(0, b) via inverse CDF; heavier tails than the Gaussian, which
// is what lets ICA find a unique rotation.
double laplace_draw(Rng& rng, double b) {
  double u = rng.next_unit() - 0.5;
  double s = u < 0 ? -1.0 : 1.0;
  return -b * s * std::log(1.0 - 2.0 * std::abs(u));
}

// Two independent Laplace sources pushed through a fixed mixing matrix.
struct Mixed {
  DTensor data;                        // [N, 2]
  std::vector<double> s0, s1;          // the true sources
};

Mixed mixed_laplace(std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  Mixed out;
  out.data = DTensor::zeros({n, 2});
  const double a00 = 2.0, a01 = 1.0, a10 = 1.0, a11 = 1.5;
  for (std::int64_t i = 0; i < n; ++i) {
    double s0 = laplace_draw(rng, 1.0);
    double s1 = laplace_draw(rng, 1.0);
    out.s0.push_back(s0);
    out.s1.push_back(s1);
    out.data[i * 2 + 0] = a00 * s0 + a01 * s1;
    out.data[i * 2 + 1] = a10 * s0 + a11 * s1;
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double num = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

DTensor correlated_data(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  Rng rng(seed);
  auto t = DTensor::zeros({n, d});
  // correlated columns so the spectrum is not flat
  for (std::int64_t i = 0; i < n; ++i) {
    double base = rng.next_normal();
    for (std::int64_t j = 0; j < d; ++j)
      t[i * d + j] = base / (1.0 + static_cast<double>(j)) + rng.next_normal();
  }
  return t;
}

// Independent oracle for the PCA spectrum: empirical covariance by
// direct loops, then a symmetric eigensolve (a different algorithm and
// matrix than the data-matrix SVD inside pca_fit).
std::vector<double> covariance_eigenvalues(const DTensor& data) {
  const std::int64_t n = data.shape[0], d = data.shape[1];
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) mean[j] += data[i * d + j];
  for (auto& m : mean) m /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t a = 0; a < d; ++a)
      for (std::int64_t b = 0; b < d; ++b)
        cov(a, b) += (data[i * d + a] - mean[a]) * (data[i * d + b] - mean[b]);
  cov /= static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  std::vector<double> ev(es.eigenvalues().data(),
                         es.eigenvalues().data() + d);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

double recon_error(const LinearModel& m, const DTensor& data) {
  auto rec = pca_reconstruct(m, data);
  double e = 0;
  for (std::int64_t i = 0; i < data.numel(); ++i)
    e += (rec[i] - data[i]) * (rec[i] - data[i]);
  return e;
}

}  // namespace

TEST_CASE("pca first component follows a 1-D line through a shifted origin") {
  Rng rng(501);
  const std::int64_t n = 64, d = 6;
  std::vector<double> dir = {0.5, -0.3, 0.1, 0.7, -0.2, 0.35};
  double norm = 0;
  for (double v : dir) norm += v * v;
  norm = std::sqrt(norm);
  for (auto& v : dir) v /= norm;
  auto data = DTensor::zeros({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    double t = rng.next_range(-2.0, 2.0);
    for (std::int64_t j = 0; j < d; ++j)
      data[i * d + j] = 3.0 + t * dir[static_cast<std::size_t>(j)];
  }
  auto m = pca_fit(data, 1);
  double cos = 0;
  for (std::int64_t j = 0; j < d; ++j)
    cos += m.components[static_cast<std::size_t>(j)] *
           dir[static_cast<std::size_t>(j)];
  CHECK(std::abs(cos) > 1.0 - 1e-6);
  for (double v : m.mean) CHECK(std::abs(v - 3.0) < 1.5);
}

TEST_CASE("pca with a complete basis reconstructs the data") {
  auto data = correlated_data(50, 8, 502);
  auto m = pca_fit(data, 8);
  auto rec = pca_reconstruct(m, data);
  double worst = 0;
  for (std::int64_t i = 0; i < data.numel(); ++i)
    worst = std::max(worst, std::abs(rec[i] - data[i]));
  CHECK(worst < 1e-4);
}

TEST_CASE("pca explained variances match the covariance eigenvalues") {
  auto data = correlated_data(400, 10, 503);
  auto m = pca_fit(data, 10);
  auto oracle = covariance_eigenvalues(data);
  for (std::int64_t i = 0; i < 10; ++i) {
    double rel = std::abs(m.explained[static_cast<std::size_t>(i)] -
                          oracle[static_cast<std::size_t>(i)]) /
                 oracle[static_cast<std::size_t>(i)];
    CHECK(rel < 1e-6);
  }
  // descending order
  for (std::size_t i = 1; i < m.explained.size(); ++i)
    CHECK(m.explained[i] <= m.explained[i - 1] + 1e-12);
}

TEST_CASE("pca rows are orthonormal") {
  auto data = correlated_data(200, 9, 504);
  auto m = pca_fit(data, 5);
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = i; j < 5; ++j) {
      double dot = 0;
      for (std::int64_t c = 0; c < 9; ++c)
        dot += m.components[static_cast<std::size_t>(i * 9 + c)] *
               m.components[static_cast<std::size_t>(j * 9 + c)];
      if (i == j)
        CHECK(std::abs(dot - 1.0) < 1e-9);
      else
        CHECK(std::abs(dot) < 1e-5);
    }
  }
}

TEST_CASE("pca reconstruction error is non-increasing in k") {
  auto data = correlated_data(120, 7, 505);
  double prev = 0;
  for (std::int64_t k = 1; k <= 7; ++k) {
    double e = recon_error(pca_fit(data, k), data);
    if (k > 1) CHECK(e <= prev + 1e-9);
    prev = e;
  }
  CHECK(prev < 1e-18);  // complete basis: error vanishes
}

TEST_CASE("pca and fastica reject invalid arguments") {
  auto data = correlated_data(20, 5, 506);
  Rng rng(1);
  CHECK_THROWS_AS(pca_fit(data, 0), contract_error);
  CHECK_THROWS_AS(pca_fit(data, 6), contract_error);  // k > min(N,D)
  CHECK_THROWS_AS(pca_fit(DTensor::zeros({4, 4, 4}), 2), dimension_error);
  auto tiny = correlated_data(4, 5, 507);
  CHECK_THROWS_AS(pca_fit(tiny, 4), contract_error);  // N <= k
  CHECK_THROWS_AS(fastica_fit(data, 0, rng), contract_error);
  CHECK_THROWS_AS(fastica_fit(data, 2, rng, 0), contract_error);
  CHECK_THROWS_AS(fastica_fit(data, 2, rng, 200, 0.0), contract_error);
  // rank-1 data cannot be whitened to 2 dimensions
  auto line = DTensor::zeros({30, 3});
  for (std::int64_t i = 0; i < 30; ++i)
    for (std::int64_t j = 0; j < 3; ++j)
      line[i * 3 + j] = static_cast<double>(i) * (j + 1.0);
  CHECK_THROWS_AS(fastica_fit(line, 2, rng), contract_error);
}

TEST_CASE("fastica recovers a Laplace mixture up to permutation and sign") {
  auto mix = mixed_laplace(20000, 510);
  Rng rng(511);
  auto m = fastica_fit(mix.data, 2, rng);
  CHECK(m.converged);
  auto src = project(m, mix.data);
  std::vector<double> r0(20000), r1(20000);
  for (std::int64_t i = 0; i < 20000; ++i) {
    r0[static_cast<std::size_t>(i)] = src[i * 2 + 0];
    r1[static_cast<std::size_t>(i)] = src[i * 2 + 1];
  }
  double c00 = std::abs(pearson(r0, mix.s0)), c01 = std::abs(pearson(r0, mix.s1));
  double c10 = std::abs(pearson(r1, mix.s0)), c11 = std::abs(pearson(r1, mix.s1));
  // best assignment of recovered to true sources
  double direct = std::min(c00, c11), swapped = std::min(c01, c10);
  CHECK(std::max(direct, swapped) > 0.95);
}

TEST_CASE("fastica whitening gives identity covariance") {
  auto mix = mixed_laplace(20000, 512);
  Rng rng(513);
  auto m = fastica_fit(mix.data, 2, rng);
  REQUIRE(m.whitening.size() == 4);
  const std::int64_t n = mix.data.shape[0];
  // z = (x - mean) * whitening^T, then cov(z) should be I
  double cov[2][2] = {{0, 0}, {0, 0}};
  for (std::int64_t i = 0; i < n; ++i) {
    double x0 = mix.data[i * 2 + 0] - m.mean[0];
    double x1 = mix.data[i * 2 + 1] - m.mean[1];
    double z0 = m.whitening[0] * x0 + m.whitening[1] * x1;
    double z1 = m.whitening[2] * x0 + m.whitening[3] * x1;
    cov[0][0] += z0 * z0;
    cov[0][1] += z0 * z1;
    cov[1][1] += z1 * z1;
  }
  CHECK(std::abs(cov[0][0] / (n - 1) - 1.0) < 1e-3);
  CHECK(std::abs(cov[1][1] / (n - 1) - 1.0) < 1e-3);
  CHECK(std::abs(cov[0][1] / (n - 1)) < 1e-3);
}

TEST_CASE("fastica sources are decorrelated with unit variance") {
  // The unmixing rows are orthonormal in whitened space, so projecting
  // the raw data through the composed components also has cov = I.
  auto mix = mixed_laplace(20000, 514);
  Rng rng(515);
  auto m = fastica_fit(mix.data, 2, rng);
  auto src = project(m, mix.data);
  const std::int64_t n = src.shape[0];
  double cov[2][2] = {{0, 0}, {0, 0}};
  for (std::int64_t i = 0; i < n; ++i) {
    cov[0][0] += src[i * 2] * src[i * 2];
    cov[0][1] += src[i * 2] * src[i * 2 + 1];
    cov[1][1] += src[i * 2 + 1] * src[i * 2 + 1];
  }
  CHECK(std::abs(cov[0][0] / (n - 1) - 1.0) < 1e-3);
  CHECK(std::abs(cov[1][1] / (n - 1) - 1.0) < 1e-3);
  CHECK(std::abs(cov[0][1] / (n - 1)) < 1e-3);
}

TEST_CASE("fastica result is seed-invariant up to permutation and sign") {
  auto mix = mixed_laplace(20000, 516);
  Rng rng_a(517), rng_b(518);
  auto ma = fastica_fit(mix.data, 2, rng_a);
  auto mb = fastica_fit(mix.data, 2, rng_b);
  auto cos = [&](std::size_t i, std::size_t j) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < 2; ++c) {
      dot += ma.components[i * 2 + c] * mb.components[j * 2 + c];
      na += ma.components[i * 2 + c] * ma.components[i * 2 + c];
      nb += mb.components[j * 2 + c] * mb.components[j * 2 + c];
    }
    return std::abs(dot) / std::sqrt(na * nb);
  };
  double direct = std::min(cos(0, 0), cos(1, 1));
  double swapped = std::min(cos(0, 1), cos(1, 0));
  CHECK(std::max(direct, swapped) > 0.99);
}

TEST_CASE("fastica returns a flagged partial result when iterations run out") {
  auto mix = mixed_laplace(5000, 519);
  Rng rng(520);
  auto m = fastica_fit(mix.data, 2, rng, 1);
  CHECK_FALSE(m.converged);
  CHECK(m.components.size() == 4);
  for (double v : m.components) CHECK(std::isfinite(v));
}

TEST_CASE("signed_gray maps zero to mid-gray and saturates at the scale") {
  CHECK(signed_gray(0.0, 1.0) == 128);
  CHECK(signed_gray(1.0, 1.0) == 255);
  CHECK(signed_gray(-1.0, 1.0) == 1);
  CHECK(signed_gray(10.0, 1.0) == 255);
  CHECK(signed_gray(-10.0, 1.0) == 0);
  CHECK(signed_gray(0.5, 0.0) == 128);  // degenerate scale: everything mid
}

TEST_CASE("export_components writes k deterministic images") {
  LinearModel m;
  m.kind = LinearKind::pca;
  m.dim = 4;
  m.k = 3;
  m.mean.assign(4, 0.0);
  // a delta at pixel 2, a negative delta at pixel 0, and a zero row
  m.components = {0, 0, 1, 0, -1, 0, 0, 0, 0, 0, 0, 0};
  m.explained = {1.0, 1.0, 0.0};
  auto dir = temp_path("export");
  fs::remove_all(dir);
  double scale = export_components(m, 2, 2, dir);
  CHECK(scale == 1.0);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  CHECK(files.size() == 3);

  auto img0 = read_pgm(dir / "component-000.pgm");
  CHECK(img0.pixels == std::vector<std::uint8_t>{128, 128, 255, 128});
  auto img1 = read_pgm(dir / "component-001.pgm");
  CHECK(img1.pixels == std::vector<std::uint8_t>{1, 128, 128, 128});
  auto img2 = read_pgm(dir / "component-002.pgm");
  CHECK(img2.pixels == std::vector<std::uint8_t>{128, 128, 128, 128});

  auto before = slurp(dir / "component-001.pgm");
  export_components(m, 2, 2, dir);
  CHECK(slurp(dir / "component-001.pgm") == before);

  CHECK_THROWS_AS(export_components(m, 3, 2, dir), contract_error);
  fs::remove_all(dir);
}

TEST_CASE("linear model round-trips through its file format") {
  auto mix = mixed_laplace(5000, 521);
  Rng rng(522);
  auto m = fastica_fit(mix.data, 2, rng);
  auto path = temp_path("model.jl1m");
  save_linear_model(path, m);
  auto back = load_linear_model(path);
  CHECK(back.kind == LinearKind::ica);
  CHECK(back.dim == m.dim);
  CHECK(back.k == m.k);
  CHECK(back.converged == m.converged);
  REQUIRE(back.components.size() == m.components.size());
  for (std::size_t i = 0; i < m.components.size(); ++i)
    CHECK(back.components[i] ==
          doctest::Approx(m.components[i]).epsilon(1e-6));
  REQUIRE(back.whitening.size() == m.whitening.size());
  fs::remove(path);
}

TEST_CASE("crops_from_pgm_dir slides windows over sorted files") {
  auto dir = temp_path("crops");
  fs::remove_all(dir);
  fs::create_directories(dir);
  // 6x6 ramp image: pixel value = flat index * 7 mod 251
  Pgm a;
  a.width = 6;
  a.height = 6;
  for (int i = 0; i < 36; ++i)
    a.pixels.push_back(static_cast<std::uint8_t>(i * 7 % 251));
  write_pgm(dir / "a.pgm", a);
  Pgm b;
  b.width = 4;
  b.height = 4;
  b.pixels.assign(16, 255);
  write_pgm(dir / "b.pgm", b);
  // too small to contribute any 4x4 crop
  Pgm c;
  c.width = 2;
  c.height = 2;
  c.pixels.assign(4, 0);
  write_pgm(dir / "c.pgm", c);
  std::ofstream(dir / "notes.txt") << "ignored";

  auto crops = crops_from_pgm_dir(dir, 4, 2);
  // a: ((6-4)/2+1)^2 = 4 crops, b: 1 crop, c: none
  CHECK(crops.shape == Shape{5, 16});
  // first crop of a starts at (0,0)
  CHECK(crops[0] == doctest::Approx(0.0));
  CHECK(crops[1] == doctest::Approx(7.0 / 255.0));
  // the b crop is all ones and comes after a's four
  for (std::int64_t j = 0; j < 16; ++j)
    CHECK(crops[4 * 16 + j] == doctest::Approx(1.0));

  auto again = crops_from_pgm_dir(dir, 4, 2);
  CHECK(again.data == crops.data);

  CHECK_THROWS_AS(crops_from_pgm_dir(dir, 7, 1), contract_error);
  CHECK_THROWS_AS(crops_from_pgm_dir(dir / "missing", 4, 2), io_error);
  CHECK_THROWS_AS(crops_from_pgm_dir(dir, 0, 2), contract_error);
  fs::remove_all(dir);
}
