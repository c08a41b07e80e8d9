#pragma once

#include <span>

#include "fvit/nn_core.hpp"

namespace fvit {

/// Additive angular margin softmax. Class weight rows and features are
/// L2-normalized before use; the true class logit is s*cos(theta_y + m),
/// every other logit s*cos(theta_j).
struct ArcFaceParams {
  double margin = 0.5;
  double scale = 30.0;
  Matrix class_weights;  // C x F

  int classes() const { return static_cast<int>(class_weights.rows()); }

  template <class F>
  void visit(F&& f) {
    f(class_weights);
  }
  template <class F>
  void visit(F&& f) const {
    f(class_weights);
  }
};

void validate(const ArcFaceParams& p);

struct ArcFaceResult {
  double loss = 0.0;
  Matrix d_features;       // B x F, empty unless requested
  Matrix d_class_weights;  // C x F, empty unless requested
};

/// Mean cross-entropy over the batch. Throws ConfigError for labels outside
/// [0, C) and NumericError for a zero-norm feature or class row.
ArcFaceResult arcface_loss(const Matrix& features, std::span<const int> labels,
                           const ArcFaceParams& p, bool want_grad = true);

/// Uniform(-1/sqrt(F), 1/sqrt(F)) class weights, deterministic in `seed`.
Matrix init_class_weights(int classes, int features, std::uint64_t seed);

}  // namespace fvit
