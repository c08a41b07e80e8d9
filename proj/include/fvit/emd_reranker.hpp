#pragma once

#include <vector>

#include "fvit/embedding_store.hpp"
#include "fvit/nn_core.hpp"

namespace fvit {

/// Transport problem between two weighted patch sets.
struct FlowProblem {
  Matrix cost;         // n x m
  Eigen::VectorXd u;   // source marginals, sum 1
  Eigen::VectorXd v;   // target marginals, sum 1
};

/// Throws ConfigError unless marginals are nonnegative, sum to 1 within 1e-9
/// and the cost is finite with entries in [0, 2].
void validate(const FlowProblem& fp);

struct SinkhornCheckpoint {
  int iteration = 0;
  double distance = 0.0;  ///< <P, C> of the current plan
  double dual = 0.0;      ///< entropic dual objective (non-decreasing)
};

struct SinkhornOptions {
  double epsilon = 0.01;
  int max_iters = 500;
  double tol = 1e-6;
  /// Run exactly max_iters iterations (benchmarks); otherwise stop once the
  /// L1 marginal violations drop below tol.
  bool fixed_iterations = false;
  /// When set, receives one checkpoint per iteration (costly: O(n m) exps).
  std::vector<SinkhornCheckpoint>* trace = nullptr;
};

struct SinkhornResult {
  Matrix flow;
  double distance = 0.0;
  int iterations = 0;
  bool converged = false;
  double row_violation = 0.0;
  double col_violation = 0.0;
};

/// Entropic optimal transport by log-domain Sinkhorn scaling. A result that
/// hit max_iters without meeting tol is returned with converged = false.
/// Throws NumericError if the potentials become NaN.
SinkhornResult sinkhorn(const FlowProblem& fp, const SinkhornOptions& options = {});

/// Exact OT cost for uniform n-point marginals: min over permutations of
/// mean cost along the permutation. n <= 8 (ConfigError otherwise).
double exact_assignment_oracle(const Matrix& cost);

enum class WeightScheme { Uniform, CrossCorrelation };

inline constexpr double kMarginalFloor = 1e-4;

/// c_ij = 1 - cos(a_i, b_j), clamped to [0, 2]; zero rows have cosine 0.
Matrix patch_cost(const Matrix& a, const Matrix& b);

/// Marginals for the scheme. CrossCorrelation: u_i proportional to
/// max(0, a_i . mean(b)) + floor, and symmetrically for v.
std::pair<Eigen::VectorXd, Eigen::VectorXd> marginal_weights(const Matrix& a, const Matrix& b,
                                                             WeightScheme scheme);

struct EmdOptions {
  WeightScheme scheme = WeightScheme::CrossCorrelation;
  SinkhornOptions sinkhorn;
};

struct EmdMatch {
  FlowProblem problem;
  SinkhornResult transport;
  double similarity = 0.0;  ///< 1 - distance
};

EmdMatch emd_match(const FaceRecord& a, const FaceRecord& b, const EmdOptions& options = {});

/// 1 - Sinkhorn distance between the two patch sets (higher = more similar).
double emd_similarity(const FaceRecord& a, const FaceRecord& b, const EmdOptions& options = {});

}  // namespace fvit
