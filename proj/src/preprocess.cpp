#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "msn/data.hpp"

namespace msn::data {
namespace {

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t image_size(const Tensor& images) {
  if (images.shape().rank() != 4) throw ShapeError("expected (N, H, W, C) images, got " + images.shape().str());
  return images.shape()[1] * images.shape()[2] * images.shape()[3];
}

}  // namespace

Tensor global_contrast_normalize(const Tensor& images, const GcnOptions& options) {
  const std::size_t n = images.shape()[0];
  const std::size_t d = image_size(images);
  Tensor out(images.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const float* src = images.data() + i * d;
    float* dst = out.data() + i * d;
    double mean = 0.0;
    for (std::size_t p = 0; p < d; ++p) mean += src[p];
    mean /= static_cast<double>(d);
    double sq = 0.0;
    for (std::size_t p = 0; p < d; ++p) sq += (src[p] - mean) * (src[p] - mean);
    const double divisor = std::max(std::sqrt(sq / static_cast<double>(d)), options.min_divisor);
    for (std::size_t p = 0; p < d; ++p) dst[p] = static_cast<float>(options.scale * (src[p] - mean) / divisor);
  }
  return out;
}

ZcaTransform zca_fit(const Tensor& images, double eps) {
  const std::size_t d = image_size(images);
  const std::size_t n = images.shape()[0];
  if (n < 2) throw std::invalid_argument("zca_fit: need at least 2 images, got " + std::to_string(n));
  if (!(eps >= 0.0)) throw std::invalid_argument("zca_fit: eps must be non-negative");

  RowMatrixD x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < d; ++p) x(i, p) = images[i * d + p];
  }
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("zca_fit: eigendecomposition failed");
  const Eigen::VectorXd scale =
      solver.eigenvalues().unaryExpr([eps](double l) { return 1.0 / std::sqrt(std::max(l, 0.0) + eps); });
  const Eigen::MatrixXd& u = solver.eigenvectors();
  Eigen::MatrixXd w = u * scale.asDiagonal() * u.transpose();
  w = (0.5 * (w + w.transpose())).eval();

  ZcaTransform t;
  t.eps = eps;
  t.mean.assign(mean.data(), mean.data() + d);
  t.whitening.resize(d * d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) t.whitening[r * d + c] = w(static_cast<long>(r), static_cast<long>(c));
  }
  return t;
}

Tensor zca_apply(const ZcaTransform& transform, const Tensor& images) {
  const std::size_t d = image_size(images);
  if (d != transform.dim()) {
    throw ShapeError("zca_apply: transform fitted on dimension " + std::to_string(transform.dim()) +
                     " applied to images " + images.shape().str());
  }
  const std::size_t n = images.shape()[0];
  RowMatrixD x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < d; ++p) x(i, p) = images[i * d + p] - transform.mean[p];
  }
  Eigen::Map<const RowMatrixD> w(transform.whitening.data(), d, d);
  const RowMatrixD y = x * w;
  Tensor out(images.shape());
  for (std::size_t i = 0; i < n * d; ++i) out[i] = static_cast<float>(y.data()[i]);
  return out;
}

void flip_horizontal(Tensor& images, std::size_t index) {
  const std::size_t h = images.shape()[1], w = images.shape()[2], c = images.shape()[3];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) std::swap(images.at(index, y, x, ch), images.at(index, y, w - 1 - x, ch));
    }
  }
}

std::vector<bool> random_flip(Tensor& images, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<bool> mask(images.shape()[0]);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = coin(rng);
    if (mask[i]) flip_horizontal(images, i);
  }
  return mask;
}

}  // namespace msn::data
