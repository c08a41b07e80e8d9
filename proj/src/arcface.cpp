#include "fvit/arcface.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "fvit/error.hpp"

namespace fvit {

namespace {

constexpr double kCosClamp = 1.0 - 1e-7;

struct Normalized {
  Matrix unit;
  Eigen::VectorXd norms;
};

Normalized normalize_rows(const Matrix& m, const char* what) {
  Normalized out{Matrix(m.rows(), m.cols()), Eigen::VectorXd(m.rows())};
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw NumericError(std::string(what) + ": zero-norm row " + std::to_string(i));
    out.norms(i) = n;
    out.unit.row(i) = m.row(i) / n;
  }
  return out;
}

// d(unit)/d(raw) applied to an upstream gradient, row-wise.
Matrix normalize_rows_backward(const Normalized& n, const Matrix& d_unit) {
  Matrix d(d_unit.rows(), d_unit.cols());
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const double proj = n.unit.row(i).dot(d_unit.row(i));
    d.row(i) = (d_unit.row(i) - proj * n.unit.row(i)) / n.norms(i);
  }
  return d;
}

}  // namespace

void validate(const ArcFaceParams& p) {
  if (!(p.margin >= 0.0 && p.margin < std::numbers::pi / 2)) {
    throw ConfigError("arcface: margin must lie in [0, pi/2)");
  }
  if (!(p.scale > 0.0)) throw ConfigError("arcface: scale must be positive");
  if (p.class_weights.rows() < 1) throw ConfigError("arcface: no classes");
}

ArcFaceResult arcface_loss(const Matrix& features, std::span<const int> labels, const ArcFaceParams& p,
                           bool want_grad) {
  validate(p);
  const Eigen::Index batch = features.rows();
  if (batch < 1) throw DimensionError("arcface: empty batch");
  if (static_cast<std::size_t>(batch) != labels.size()) throw DimensionError("arcface: label count mismatch");
  if (features.cols() != p.class_weights.cols()) throw DimensionError("arcface: feature width mismatch");
  require_finite(features, "arcface features");
  for (int y : labels) {
    if (y < 0 || y >= p.classes()) throw ConfigError("arcface: label " + std::to_string(y) + " out of range");
  }

  const Normalized x = normalize_rows(features, "arcface feature");
  const Normalized w = normalize_rows(p.class_weights, "arcface class weight");
  const Matrix cosines = x.unit * w.unit.transpose();  // B x C

  const double cos_m = std::cos(p.margin);
  const double sin_m = std::sin(p.margin);
  const auto inv_batch = 1.0 / static_cast<double>(batch);

  ArcFaceResult result;
  Matrix d_cos = Matrix::Zero(batch, cosines.cols());
  Eigen::VectorXd logits(cosines.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    const double raw = cosines(b, y);
    const double c = std::clamp(raw, -kCosClamp, kCosClamp);
    const double theta = std::acos(c);
    logits = p.scale * cosines.row(b).transpose();
    logits(y) = p.scale * std::cos(theta + p.margin);

    // log-sum-exp with the dominant term factored out through log1p so tiny
    // losses keep their relative precision.
    Eigen::Index top = 0;
    const double mx = logits.maxCoeff(&top);
    double tail = 0.0;
    for (Eigen::Index j = 0; j < logits.size(); ++j) {
      if (j != top) tail += std::exp(logits(j) - mx);
    }
    const double lse = mx + std::log1p(tail);
    result.loss += ((mx - logits(y)) + std::log1p(tail)) * inv_batch;

    if (want_grad) {
      for (Eigen::Index j = 0; j < logits.size(); ++j) {
        const double prob = std::exp(logits(j) - lse);
        const double dlogit = (prob - (j == y ? 1.0 : 0.0)) * inv_batch;
        if (j != y) {
          d_cos(b, j) = p.scale * dlogit;
        } else if (raw > -kCosClamp && raw < kCosClamp) {
          const double sin_theta = std::sqrt(1.0 - c * c);
          d_cos(b, j) = p.scale * dlogit * (cos_m + sin_m * c / sin_theta);
        }
      }
    }
  }

  if (want_grad) {
    result.d_features = normalize_rows_backward(x, d_cos * w.unit);
    result.d_class_weights = normalize_rows_backward(w, d_cos.transpose() * x.unit);
  }
  return result;
}

Matrix init_class_weights(int classes, int features, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xA5CFACEull);
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Matrix w(classes, features);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(uni(rng));
  return w;
}

}  // namespace fvit
