#include "fvit/emd_reranker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fvit/error.hpp"

namespace fvit {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum_j exp(base_j + row_j)) over a contiguous row.
double log_sum_exp(const double* base, const double* row, Eigen::Index n) {
  double mx = kNegInf;
  for (Eigen::Index j = 0; j < n; ++j) mx = std::max(mx, base[j] + row[j]);
  if (mx == kNegInf) return kNegInf;
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(base[j] + row[j] - mx);
  return mx + std::log(sum);
}

Matrix transport_plan(const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta, const Matrix& log_kernel) {
  Matrix plan(log_kernel.rows(), log_kernel.cols());
  for (Eigen::Index i = 0; i < plan.rows(); ++i) {
    for (Eigen::Index j = 0; j < plan.cols(); ++j) plan(i, j) = std::exp(alpha(i) + beta(j) + log_kernel(i, j));
  }
  return plan;
}

double dual_objective(const FlowProblem& fp, const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta,
                      const Matrix& plan, double eps) {
  double value = -eps * plan.sum();
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    if (fp.u(i) > 0.0) value += eps * alpha(i) * fp.u(i);
  }
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    if (fp.v(j) > 0.0) value += eps * beta(j) * fp.v(j);
  }
  return value;
}

}  // namespace

void validate(const FlowProblem& fp) {
  if (fp.cost.rows() != fp.u.size() || fp.cost.cols() != fp.v.size() || fp.u.size() == 0 || fp.v.size() == 0) {
    throw DimensionError("flow problem: cost / marginal shape mismatch");
  }
  if (!fp.cost.allFinite() || fp.cost.minCoeff() < -1e-9 || fp.cost.maxCoeff() > 2.0 + 1e-9) {
    throw ConfigError("flow problem: cost entries must lie in [0, 2]");
  }
  for (const Eigen::VectorXd* m : {&fp.u, &fp.v}) {
    if (!m->allFinite() || m->minCoeff() < 0.0 || std::abs(m->sum() - 1.0) > 1e-9) {
      throw ConfigError("flow problem: marginals must be nonnegative and sum to 1");
    }
  }
}

SinkhornResult sinkhorn(const FlowProblem& fp, const SinkhornOptions& options) {
  validate(fp);
  const double eps = options.epsilon;
  if (!(eps >= 1e-3 && eps <= 1.0)) throw ConfigError("sinkhorn: epsilon must lie in [1e-3, 1]");
  if (!(options.tol > 0.0) && !options.fixed_iterations) throw ConfigError("sinkhorn: tol must be positive");
  if (options.max_iters < 1) throw ConfigError("sinkhorn: max_iters must be >= 1");

  const Eigen::Index n = fp.cost.rows();
  const Eigen::Index m = fp.cost.cols();
  // Potentials are kept divided by eps: alpha = f / eps, beta = g / eps.
  const Matrix log_kernel = fp.cost * (-1.0 / eps);
  const Matrix log_kernel_t = log_kernel.transpose();
  const Eigen::VectorXd log_u = fp.u.array().log();
  const Eigen::VectorXd log_v = fp.v.array().log();
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd row_lse(n);

  SinkhornResult result;
  int iter = 0;
  for (; iter < options.max_iters; ++iter) {
    double row_violation = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      row_lse(i) = log_sum_exp(beta.data(), log_kernel.row(i).data(), m);
      // Row mass of the plan left by the previous column update.
      if (iter > 0) row_violation += std::abs(std::exp(alpha(i) + row_lse(i)) - fp.u(i));
    }
    if (!options.fixed_iterations && iter > 0 && row_violation < options.tol) {
      result.converged = true;
      break;
    }
    alpha = log_u - row_lse;
    for (Eigen::Index j = 0; j < m; ++j) {
      beta(j) = log_v(j) - log_sum_exp(alpha.data(), log_kernel_t.row(j).data(), n);
    }
    if (alpha.hasNaN() || beta.hasNaN()) throw NumericError("sinkhorn: NaN in scaling potentials");

    if (options.trace != nullptr) {
      const Matrix plan = transport_plan(alpha, beta, log_kernel);
      options.trace->push_back({iter + 1, plan.cwiseProduct(fp.cost).sum(), dual_objective(fp, alpha, beta, plan, eps)});
    }
  }
  result.iterations = iter;

  result.flow = transport_plan(alpha, beta, log_kernel);
  if (!result.flow.allFinite()) throw NumericError("sinkhorn: non-finite transport plan");
  result.distance = result.flow.cwiseProduct(fp.cost).sum();
  result.row_violation = (result.flow.rowwise().sum() - fp.u).lpNorm<1>();
  result.col_violation = (result.flow.colwise().sum().transpose() - fp.v).lpNorm<1>();
  if (options.fixed_iterations) {
    result.converged = result.row_violation < options.tol && result.col_violation < options.tol;
  }
  return result;
}

double exact_assignment_oracle(const Matrix& cost) {
  const Eigen::Index n = cost.rows();
  if (n != cost.cols() || n < 1) throw DimensionError("assignment oracle: cost must be square");
  if (n > 8) throw ConfigError("assignment oracle: n must be <= 8");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

Matrix patch_cost(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("patch_cost: embedding width mismatch");
  auto unit_rows = [](const Matrix& x) {
    Matrix u = x;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double norm = u.row(i).norm();
      if (norm > 0.0) u.row(i) /= norm;
    }
    return u;
  };
  Matrix c(a.rows(), b.rows());
  c.noalias() = unit_rows(a) * unit_rows(b).transpose();
  return (1.0 - c.array()).cwiseMax(0.0).cwiseMin(2.0).matrix();
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> marginal_weights(const Matrix& a, const Matrix& b,
                                                             WeightScheme scheme) {
  if (scheme == WeightScheme::Uniform) {
    return {Eigen::VectorXd::Constant(a.rows(), 1.0 / static_cast<double>(a.rows())),
            Eigen::VectorXd::Constant(b.rows(), 1.0 / static_cast<double>(b.rows()))};
  }
  auto weights = [](const Matrix& x, const Matrix& other) {
    const Eigen::VectorXd pooled = other.colwise().mean().transpose();
    Eigen::VectorXd w = (x * pooled).cwiseMax(0.0).array() + kMarginalFloor;
    return Eigen::VectorXd(w / w.sum());
  };
  return {weights(a, b), weights(b, a)};
}

EmdMatch emd_match(const FaceRecord& a, const FaceRecord& b, const EmdOptions& options) {
  EmdMatch match;
  match.problem.cost = patch_cost(a.patches, b.patches);
  std::tie(match.problem.u, match.problem.v) = marginal_weights(a.patches, b.patches, options.scheme);
  match.transport = sinkhorn(match.problem, options.sinkhorn);
  match.similarity = 1.0 - match.transport.distance;
  return match;
}

double emd_similarity(const FaceRecord& a, const FaceRecord& b, const EmdOptions& options) {
  return emd_match(a, b, options).similarity;
}

}  // namespace fvit
