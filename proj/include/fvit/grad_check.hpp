#pragma once

#include <cstdint>
#include <functional>
#include <span>

namespace fvit {

/// Scalar objective. When `grad` is non-empty it must be filled with the
/// reverse-mode gradient at `theta` (same length).
using Objective = std::function<double(std::span<const double> theta, std::span<double> grad)>;

struct GradCheckOptions {
  enum class Mode { Auto, Coordinates, Directions };
  Mode mode = Mode::Auto;
  /// Auto switches to random directions above this many parameters.
  std::size_t coordinate_limit = 2048;
  int directions = 16;
  std::uint64_t seed = 0;
};

/// Central-difference check of the analytic gradient of `f` at `theta`.
/// Returns the max relative error, each probe guarded by
/// max(|analytic|, |numeric|, 1e-8). Throws NumericError if `f` is
/// non-finite at any probe point.
double grad_check(const Objective& f, std::span<const double> theta, double h,
                  const GradCheckOptions& options = {});

}  // namespace fvit
