#include "jl1/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "jl1/checkpoint.hpp"
#include "jl1/errors.hpp"

namespace jl1 {

namespace {

using Mat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct Centered {
  Mat x;     // [N, D] mean-removed
  Vec mean;  // [D]
};

Centered center(const TensorT<double>& data, std::int64_t k,
                const char* who) {
  if (data.rank() != 2)
    throw dimension_error(std::string(who) + ": expects data [N,D], got " +
                          shape_str(data.shape));
  const std::int64_t n = data.shape[0], d = data.shape[1];
  if (k < 1 || k > std::min(n, d))
    throw contract_error(std::string(who) + ": k must be in [1, min(N,D)]");
  if (n <= k)
    throw contract_error(std::string(who) +
                         ": needs more samples than components");
  Centered c;
  c.x = Eigen::Map<const Mat>(data.ptr(), n, d);
  c.mean = c.x.colwise().mean();
  c.x.rowwise() -= c.mean.transpose();
  return c;
}

// Flip each row so its largest-magnitude entry (first on ties) is
// positive; removes the sign ambiguity of singular vectors.
void canonicalize_rows(Mat& rows) {
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    Eigen::Index arg = 0;
    rows.row(i).cwiseAbs().maxCoeff(&arg);
    if (rows(i, arg) < 0.0) rows.row(i) = -rows.row(i);
  }
}

void check_same_dim(const LinearModel& m, const TensorT<double>& data,
                    const char* who) {
  if (data.rank() != 2 || data.shape[1] != m.dim)
    throw dimension_error(std::string(who) + ": expects data [N," +
                          std::to_string(m.dim) + "], got " +
                          shape_str(data.shape));
}

}  // namespace

LinearModel pca_fit(const TensorT<double>& data, std::int64_t k) {
  Centered c = center(data, k, "pca_fit");
  const std::int64_t n = data.shape[0], d = data.shape[1];
  Eigen::BDCSVD<Mat> svd(c.x, Eigen::ComputeThinV);
  Mat comp(k, d);
  LinearModel m;
  m.kind = LinearKind::pca;
  m.dim = d;
  m.k = k;
  m.explained.resize(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    comp.row(i) = svd.matrixV().col(i).transpose();
    const double s = svd.singularValues()(i);
    m.explained[static_cast<std::size_t>(i)] =
        s * s / static_cast<double>(n - 1);
  }
  canonicalize_rows(comp);
  m.mean.assign(c.mean.data(), c.mean.data() + d);
  m.components.assign(comp.data(), comp.data() + k * d);
  return m;
}

LinearModel fastica_fit(const TensorT<double>& data, std::int64_t k, Rng& rng,
                        std::int64_t max_iter, double tol) {
  if (max_iter < 1) throw contract_error("fastica_fit: max_iter must be >= 1");
  if (!(tol > 0.0)) throw contract_error("fastica_fit: tol must be positive");
  Centered c = center(data, k, "fastica_fit");
  const std::int64_t n = data.shape[0], d = data.shape[1];

  Eigen::BDCSVD<Mat> svd(c.x, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (!(sv(k - 1) * sv(k - 1) > 1e-12 * sv(0) * sv(0)))
    throw contract_error(
        "fastica_fit: data rank is too low for the requested k");
  // Whitening rows: v_i^T / sqrt(lambda_i); whitened Z = Xc * Wwhite^T
  // has identity covariance.
  Mat wwhite(k, d);
  for (std::int64_t i = 0; i < k; ++i) {
    const double lambda = sv(i) * sv(i) / static_cast<double>(n - 1);
    wwhite.row(i) = svd.matrixV().col(i).transpose() / std::sqrt(lambda);
  }
  Mat z = c.x * wwhite.transpose();  // [N, k]

  // Random orthonormal start, drawn row-major so the stream is
  // position-independent of Eigen internals.
  Mat w(k, k);
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = 0; j < k; ++j) w(i, j) = rng.next_normal();

  auto decorrelate = [](const Mat& raw) {
    Eigen::SelfAdjointEigenSolver<Mat> es(raw * raw.transpose());
    const auto& ev = es.eigenvalues();
    if (!(ev(0) > 1e-12 * ev(ev.size() - 1)))
      throw numeric_error("fastica_fit: degenerate unmixing iterate");
    Mat inv_sqrt = es.eigenvectors() *
                   ev.cwiseSqrt().cwiseInverse().asDiagonal() *
                   es.eigenvectors().transpose();
    return Mat(inv_sqrt * raw);
  };
  w = decorrelate(w);

  LinearModel m;
  m.converged = false;
  for (std::int64_t it = 0; it < max_iter; ++it) {
    Mat y = z * w.transpose();        // [N, k], y_{n,i} = <w_i, z_n>
    Mat g = y.array().tanh().matrix();
    Mat gp = (1.0 - g.array().square()).matrix();
    Vec gprime_mean = gp.colwise().mean().transpose();
    Mat wplus = (g.transpose() * z) / static_cast<double>(n) -
                gprime_mean.asDiagonal() * w;
    Mat wnew = decorrelate(wplus);
    double delta = 0.0;
    for (std::int64_t i = 0; i < k; ++i)
      delta = std::max(delta,
                       std::abs(1.0 - std::abs(wnew.row(i).dot(w.row(i)))));
    w = std::move(wnew);
    if (delta < tol) {
      m.converged = true;
      break;
    }
  }

  Mat comp = w * wwhite;  // unmixing composed with whitening, [k, D]
  canonicalize_rows(comp);
  m.kind = LinearKind::ica;
  m.dim = d;
  m.k = k;
  m.mean.assign(c.mean.data(), c.mean.data() + d);
  m.components.assign(comp.data(), comp.data() + k * d);
  m.whitening.assign(wwhite.data(), wwhite.data() + k * d);
  m.explained.resize(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i)
    m.explained[static_cast<std::size_t>(i)] =
        sv(i) * sv(i) / static_cast<double>(n - 1);
  return m;
}

TensorT<double> project(const LinearModel& m, const TensorT<double>& data) {
  check_same_dim(m, data, "project");
  const std::int64_t n = data.shape[0];
  Mat x = Eigen::Map<const Mat>(data.ptr(), n, m.dim);
  x.rowwise() -= Eigen::Map<const Vec>(m.mean.data(), m.dim).transpose();
  Eigen::Map<const Mat> comp(m.components.data(), m.k, m.dim);
  Mat p = x * comp.transpose();
  TensorT<double> out = TensorT<double>::zeros({n, m.k});
  Eigen::Map<Mat>(out.ptr(), n, m.k) = p;
  return out;
}

TensorT<double> pca_reconstruct(const LinearModel& m,
                                const TensorT<double>& data) {
  if (m.kind != LinearKind::pca)
    throw contract_error("pca_reconstruct: model is not a PCA model");
  check_same_dim(m, data, "pca_reconstruct");
  const std::int64_t n = data.shape[0];
  Mat x = Eigen::Map<const Mat>(data.ptr(), n, m.dim);
  Eigen::Map<const Vec> mean(m.mean.data(), m.dim);
  x.rowwise() -= mean.transpose();
  Eigen::Map<const Mat> comp(m.components.data(), m.k, m.dim);
  Mat rec = (x * comp.transpose()) * comp;
  rec.rowwise() += mean.transpose();
  TensorT<double> out = TensorT<double>::zeros({n, m.dim});
  Eigen::Map<Mat>(out.ptr(), n, m.dim) = rec;
  return out;
}

double export_components(const LinearModel& m, std::int64_t height,
                         std::int64_t width,
                         const std::filesystem::path& out_dir) {
  if (height * width != m.dim)
    throw contract_error("export_components: geometry " +
                         std::to_string(height) + "x" + std::to_string(width) +
                         " does not match dim " + std::to_string(m.dim));
  std::filesystem::create_directories(out_dir);
  double scale = 0.0;
  for (double v : m.components) scale = std::max(scale, std::abs(v));
  for (std::int64_t i = 0; i < m.k; ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "component-%03lld.pgm",
                  static_cast<long long>(i));
    write_pgm(out_dir / name,
              signed_gray_image(m.components.data() + i * m.dim, height,
                                width, scale));
  }
  return scale;
}

void save_linear_model(const std::filesystem::path& path,
                       const LinearModel& m) {
  nlohmann::json meta;
  meta["kind"] = m.kind == LinearKind::pca ? "pca" : "ica";
  meta["dim"] = m.dim;
  meta["k"] = m.k;
  meta["converged"] = m.converged;
  auto as_tensor = [](Shape s, const std::vector<double>& v) {
    Tensor t = Tensor::zeros(std::move(s));
    for (std::size_t i = 0; i < v.size(); ++i)
      t.data[i] = static_cast<float>(v[i]);
    return t;
  };
  std::vector<NamedTensor> tensors;
  tensors.push_back({"mean", as_tensor({m.dim}, m.mean)});
  tensors.push_back({"components", as_tensor({m.k, m.dim}, m.components)});
  if (!m.whitening.empty())
    tensors.push_back({"whitening", as_tensor({m.k, m.dim}, m.whitening)});
  tensors.push_back({"explained", as_tensor({m.k}, m.explained)});
  write_checkpoint(path, std::move(meta), tensors);
}

LinearModel load_linear_model(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  LinearModel m;
  const std::string kind = ck.meta.at("kind").get<std::string>();
  if (kind == "pca")
    m.kind = LinearKind::pca;
  else if (kind == "ica")
    m.kind = LinearKind::ica;
  else
    throw format_error(path.string() + ": unknown linear model kind " + kind);
  m.dim = ck.meta.at("dim").get<std::int64_t>();
  m.k = ck.meta.at("k").get<std::int64_t>();
  m.converged = ck.meta.at("converged").get<bool>();
  auto take = [&](const std::string& name, bool required) {
    for (const auto& t : ck.tensors)
      if (t.name == name)
        return std::vector<double>(t.value.data.begin(), t.value.data.end());
    if (required)
      throw format_error(path.string() + ": missing tensor " + name);
    return std::vector<double>();
  };
  m.mean = take("mean", true);
  m.components = take("components", true);
  m.whitening = take("whitening", false);
  m.explained = take("explained", true);
  if (m.mean.size() != static_cast<std::size_t>(m.dim) ||
      m.components.size() != static_cast<std::size_t>(m.k * m.dim))
    throw format_error(path.string() + ": tensor sizes disagree with meta");
  return m;
}

TensorT<double> crops_from_pgm_dir(const std::filesystem::path& dir,
                                   std::int64_t crop, std::int64_t stride) {
  if (crop < 1 || stride < 1)
    throw contract_error("crops_from_pgm_dir: crop and stride must be >= 1");
  if (!std::filesystem::is_directory(dir))
    throw io_error("crops_from_pgm_dir: not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm")
      files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) {
              return a.filename().string() < b.filename().string();
            });
  std::vector<double> rows;
  std::int64_t n = 0;
  for (const auto& f : files) {
    Pgm img = read_pgm(f);
    for (std::int64_t y = 0; y + crop <= img.height; y += stride)
      for (std::int64_t x = 0; x + crop <= img.width; x += stride) {
        for (std::int64_t cy = 0; cy < crop; ++cy)
          for (std::int64_t cx = 0; cx < crop; ++cx)
            rows.push_back(
                img.pixels[static_cast<std::size_t>((y + cy) * img.width +
                                                    (x + cx))] /
                255.0);
        ++n;
      }
  }
  if (n == 0)
    throw contract_error("crops_from_pgm_dir: no " + std::to_string(crop) +
                         "x" + std::to_string(crop) + " crops under " +
                         dir.string());
  return TensorT<double>({n, crop * crop}, std::move(rows));
}

}  // namespace jl1
