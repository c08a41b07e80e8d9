#include "fvit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fvit/error.hpp"

namespace fvit {

namespace {

double evaluate(const Objective& f, const std::vector<double>& theta) {
  const double v = f(theta, {});
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is non-finite at a probe point");
  return v;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

double grad_check(const Objective& f, std::span<const double> theta, double h,
                  const GradCheckOptions& options) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw ConfigError("grad_check: step must lie in [1e-6, 1e-4]");

  const std::size_t n = theta.size();
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(n, 0.0);
  if (!std::isfinite(f(point, grad))) throw NumericError("grad_check: objective is non-finite");

  bool coordinates = options.mode == GradCheckOptions::Mode::Coordinates;
  if (options.mode == GradCheckOptions::Mode::Auto) coordinates = n <= options.coordinate_limit;

  double worst = 0.0;
  if (coordinates) {
    for (std::size_t i = 0; i < n; ++i) {
      const double saved = point[i];
      point[i] = saved + h;
      const double up = evaluate(f, point);
      point[i] = saved - h;
      const double down = evaluate(f, point);
      point[i] = saved;
      worst = std::max(worst, relative_error(grad[i], (up - down) / (2.0 * h)));
    }
    return worst;
  }

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal;
  std::vector<double> dir(n), probe(n);
  for (int d = 0; d < options.directions; ++d) {
    double norm = 0.0;
    for (auto& x : dir) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dir[i] /= norm;
      analytic += grad[i] * dir[i];
    }
    for (std::size_t i = 0; i < n; ++i) probe[i] = point[i] + h * dir[i];
    const double up = evaluate(f, probe);
    for (std::size_t i = 0; i < n; ++i) probe[i] = point[i] - h * dir[i];
    const double down = evaluate(f, probe);
    worst = std::max(worst, relative_error(analytic, (up - down) / (2.0 * h)));
  }
  return worst;
}

}  // namespace fvit
