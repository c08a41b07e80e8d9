#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "fvit/emd_reranker.hpp"
#include "fvit/error.hpp"
#include "test_util.hpp"

namespace fvit {
namespace {

using test::random_matrix;
using test::uniform_matrix;

FlowProblem uniform_problem(const Matrix& cost) {
  FlowProblem fp;
  fp.cost = cost;
  fp.u = Eigen::VectorXd::Constant(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
  fp.v = Eigen::VectorXd::Constant(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
  return fp;
}

// Test-side enumeration, independent of the library oracle.
double brute_force_assignment(const Matrix& c) {
  std::vector<int> p(static_cast<std::size_t>(c.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += c(static_cast<Eigen::Index>(i), p[i]);
    best = std::min(best, s / static_cast<double>(p.size()));
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

SinkhornOptions tight(double eps) {
  SinkhornOptions o;
  o.epsilon = eps;
  o.max_iters = 100000;
  o.tol = 1e-9;
  return o;
}

TEST(Oracle, Examples) {
  EXPECT_EQ(exact_assignment_oracle(Matrix::Zero(5, 5)), 0.0);
  Matrix c2(2, 2);
  c2 << 0, 1, 1, 0;
  EXPECT_EQ(exact_assignment_oracle(c2), 0.0);
  // Hand enumeration of the six 3x3 permutations.
  Matrix c3(3, 3);
  c3 << 0.9, 0.2, 0.7,
        0.4, 0.8, 0.1,
        0.3, 0.6, 0.5;
  const double perms[6] = {0.9 + 0.8 + 0.5, 0.9 + 0.1 + 0.6, 0.2 + 0.4 + 0.5,
                           0.2 + 0.1 + 0.3, 0.7 + 0.4 + 0.6, 0.7 + 0.8 + 0.3};
  EXPECT_NEAR(exact_assignment_oracle(c3), *std::min_element(perms, perms + 6) / 3.0, 1e-15);
  EXPECT_THROW(exact_assignment_oracle(Matrix::Zero(9, 9)), ConfigError);
  EXPECT_THROW(exact_assignment_oracle(Matrix::Zero(3, 4)), DimensionError);
}

TEST(Oracle, AgreesWithBruteForce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix c = uniform_matrix(6, 6, seed, 0.0, 2.0);
    EXPECT_NEAR(exact_assignment_oracle(c), brute_force_assignment(c), 1e-15);
  }
}

TEST(Sinkhorn, IdenticalPatchSetsHaveNearZeroDistance) {
  const FaceRecord a = test::random_record(8, 32, 3);
  EmdOptions o;
  o.scheme = WeightScheme::Uniform;
  const EmdMatch m = emd_match(a, a, o);
  EXPECT_LT(m.problem.cost.diagonal().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(m.transport.distance, 0.01);
  EXPECT_GE(m.similarity, 0.99);
}

TEST(Sinkhorn, TwoPointPermutationCase) {
  Matrix c(2, 2);
  c << 0, 1, 1, 0;
  const SinkhornResult r = sinkhorn(uniform_problem(c), tight(1e-3));
  EXPECT_TRUE(r.converged);
  EXPECT_LT(std::abs(r.distance), 5e-3);
}

TEST(Sinkhorn, RandomFourByFourMatchesOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Matrix c = uniform_matrix(4, 4, 1000 + seed, 0.0, 2.0);
    const SinkhornResult r = sinkhorn(uniform_problem(c), tight(1e-3));
    EXPECT_LT(std::abs(r.distance - brute_force_assignment(c)), 1e-2) << "seed " << seed;
  }
}

TEST(Sinkhorn, MarginalsMatchAtConvergence) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FlowProblem fp;
    fp.cost = uniform_matrix(7, 5, seed, 0.0, 2.0);
    fp.u = uniform_matrix(7, 1, seed + 50, 0.1, 1.0);
    fp.v = uniform_matrix(5, 1, seed + 60, 0.1, 1.0);
    fp.u /= fp.u.sum();
    fp.v /= fp.v.sum();
    SinkhornOptions o;
    o.max_iters = 20000;
    const SinkhornResult r = sinkhorn(fp, o);
    ASSERT_TRUE(r.converged);
    EXPECT_LT((r.flow.rowwise().sum() - fp.u).lpNorm<1>(), o.tol);
    EXPECT_LT((r.flow.colwise().sum().transpose() - fp.v).lpNorm<1>(), o.tol);
    EXPECT_GE(r.flow.minCoeff(), 0.0);
    EXPECT_NEAR(r.distance, r.flow.cwiseProduct(fp.cost).sum(), 1e-15);
  }
}

// The entropic dual rises with every sweep; the primal cost of intermediate
// plans is not monotone (each plan satisfies only one marginal), so the
// checkpoint property is asserted on the dual.
TEST(Sinkhorn, DualObjectiveNonDecreasing) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix c = uniform_matrix(8, 8, 300 + seed, 0.0, 2.0);
    std::vector<SinkhornCheckpoint> trace;
    SinkhornOptions o;
    o.epsilon = 0.05;
    o.trace = &trace;
    const SinkhornResult r = sinkhorn(uniform_problem(c), o);
    ASSERT_EQ(static_cast<int>(trace.size()), r.iterations);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i].dual, trace[i - 1].dual - 1e-9);
    // The last checkpoint is the returned plan.
    EXPECT_NEAR(trace.back().distance, r.distance, 1e-12);
  }
}

TEST(Sinkhorn, SmallerEpsilonDoesNotIncreaseDistance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix c = uniform_matrix(6, 6, 500 + seed, 0.0, 2.0);
    const double fine = sinkhorn(uniform_problem(c), tight(1e-3)).distance;
    const double coarse = sinkhorn(uniform_problem(c), tight(1e-1)).distance;
    EXPECT_LE(fine, coarse + 1e-3);
  }
}

TEST(Sinkhorn, FixedIterationModeRunsExactly) {
  const Matrix c = uniform_matrix(5, 5, 9, 0.0, 2.0);
  SinkhornOptions o;
  o.fixed_iterations = true;
  o.max_iters = 37;
  EXPECT_EQ(sinkhorn(uniform_problem(c), o).iterations, 37);
}

TEST(Sinkhorn, UnconvergedRunIsFlagged) {
  const Matrix c = uniform_matrix(6, 6, 10, 0.0, 2.0);
  SinkhornOptions o;
  o.epsilon = 1e-3;
  o.max_iters = 2;
  o.tol = 1e-12;
  const SinkhornResult r = sinkhorn(uniform_problem(c), o);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(std::isfinite(r.distance));
}

TEST(Sinkhorn, InvalidInputsRejected) {
  FlowProblem fp = uniform_problem(uniform_matrix(3, 3, 1, 0.0, 2.0));
  SinkhornOptions o;
  o.epsilon = 1e-4;
  EXPECT_THROW(sinkhorn(fp, o), ConfigError);
  FlowProblem bad_cost = fp;
  bad_cost.cost(0, 0) = 2.5;
  EXPECT_THROW(sinkhorn(bad_cost), ConfigError);
  FlowProblem bad_u = fp;
  bad_u.u(0) += 0.1;
  EXPECT_THROW(sinkhorn(bad_u), ConfigError);
  FlowProblem bad_shape = fp;
  bad_shape.v = Eigen::VectorXd::Constant(4, 0.25);
  EXPECT_THROW(sinkhorn(bad_shape), DimensionError);
}

TEST(PatchCost, RangeAndZeroRows) {
  Matrix a = random_matrix(5, 6, 1);
  a.row(2).setZero();
  const Matrix c = patch_cost(a, random_matrix(4, 6, 2));
  EXPECT_GE(c.minCoeff(), 0.0);
  EXPECT_LE(c.maxCoeff(), 2.0);
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(c(2, j), 1.0);
  EXPECT_THROW(patch_cost(a, random_matrix(4, 5, 3)), DimensionError);
}

TEST(Weights, SchemesProduceValidMarginals) {
  const Matrix a = random_matrix(16, 8, 4);
  const Matrix b = random_matrix(16, 8, 5);
  for (WeightScheme s : {WeightScheme::Uniform, WeightScheme::CrossCorrelation}) {
    const auto [u, v] = marginal_weights(a, b, s);
    EXPECT_NEAR(u.sum(), 1.0, 1e-12);
    EXPECT_NEAR(v.sum(), 1.0, 1e-12);
    EXPECT_GT(u.minCoeff(), 0.0);
    EXPECT_GT(v.minCoeff(), 0.0);
  }
}

// Symmetry is a property of the converged plan; at eps = 0.01 random patch
// sets need far more than the default 500 sweeps to get there.
TEST(EmdSimilarity, SymmetricUnderUniformWeights) {
  EmdOptions o;
  o.scheme = WeightScheme::Uniform;
  o.sinkhorn.max_iters = 50000;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FaceRecord a = test::random_record(4, 16, seed);
    const FaceRecord b = test::random_record(4, 16, seed + 40);
    EXPECT_NEAR(emd_similarity(a, b, o), emd_similarity(b, a, o), 1e-6);
  }
}

TEST(EmdSimilarity, CrossCorrelationDownweightsOccludedRows) {
  SynthConfig c;
  c.n_identities = 50;
  c.records_per_identity = 2;
  c.queries_per_identity = 1;
  c.occluded_fraction = 1.0;
  const SyntheticSet s = generate_synthetic(c);
  const auto [first, last] = occluded_grid_rows(Occlusion::Mask, 8);
  double mass = 0.0;
  for (std::size_t i = 0; i < s.queries.size(); ++i) {
    const FaceRecord& q = s.queries[i];
    const FaceRecord& mate = s.gallery[static_cast<std::size_t>(q.identity) * 2];
    const auto [u, v] = marginal_weights(q.patches, mate.patches, WeightScheme::CrossCorrelation);
    mass += u.segment(first * 8, (last - first) * 8).sum() / static_cast<double>(s.queries.size());
  }
  EXPECT_LT(mass, 3.0 / 8.0);
}

}  // namespace
}  // namespace fvit
