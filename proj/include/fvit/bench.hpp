#pragma once

// Stage-2 timing harness: identical shortlists are re-ranked by each
// reranker kind, repeated, and summarized by median / IQR. Also fits the
// log-log growth of the median time against the patch count.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fvit/pipeline.hpp"

namespace fvit {

struct BenchConfig {
  std::string suite = "custom";
  std::vector<RerankerKind> kinds{RerankerKind::None, RerankerKind::Emd, RerankerKind::H2L};
  std::vector<int> grids{8};   ///< n_patches = grid^2
  int dim = kDefaultDim;
  int k = 100;
  int queries = 100;
  int warmups = 2;             ///< each warm-up re-ranks the first query only
  int reps = 5;
  int depth = 1;
  int heads = 2;
  EmdOptions emd = fixed_iteration_emd();
  double sigma = 0.7;
  std::uint64_t seed = 0;
  int workers = 1;             ///< 1 for scaling fits; more for throughput runs
  /// A case is unstable when the sample standard deviation of its reps
  /// exceeds this share of the median.
  double instability_limit = 0.5;

  static EmdOptions fixed_iteration_emd() {
    EmdOptions o;
    o.sinkhorn.fixed_iterations = true;
    return o;
  }
};

/// n in {16, 64, 256}, d = 512, short shortlist so the 256-patch EMD stays affordable.
BenchConfig scaling_suite();
/// n = 64, d = 512, k = 100, 100 queries.
BenchConfig wallclock_suite();

void validate(const BenchConfig& cfg);

/// Shared inputs for one (grid, dim) case: data, stage-1 shortlists, model.
struct BenchInputs {
  int grid = 0;
  int dim = 0;
  Gallery gallery;
  QuerySet queries;
  std::vector<std::vector<ScoredIndex>> stage1;
  ModelWeights model;
};

BenchInputs make_bench_inputs(int grid, const BenchConfig& cfg);

struct TimingStats {
  RerankerKind kind = RerankerKind::None;
  int n_patches = 0;
  int d = 0;
  int k = 0;
  int queries = 0;
  std::vector<double> seconds;  ///< measured reps
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double rel_stddev = 0.0;
  bool unstable = false;
};

/// Times stage 2 for one kind. `results` (optional) receives the rankings of
/// the last measured rep.
TimingStats time_stage2(RerankerKind kind, const BenchInputs& in, const BenchConfig& cfg,
                        std::vector<RankingResult>* results = nullptr);

/// Convenience: builds inputs for (n_patches, d) and times one kind.
TimingStats time_reranker(RerankerKind kind, int n_patches, int d, int n_queries, int k, int reps,
                          const BenchConfig& base = {});

/// Median / quartiles (linear interpolation) and instability flag.
TimingStats summarize(TimingStats t, double instability_limit);

/// Least-squares slope of log(y) against log(x).
double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct BenchReport {
  BenchConfig config;
  std::vector<TimingStats> cases;
  std::map<RerankerKind, double> slopes;  ///< only when >= 2 stable grids
  double stage1_seconds = 0.0;            ///< stage-1 ranking of all queries, last grid
};

BenchReport run_bench(const BenchConfig& cfg, const std::function<void(const TimingStats&)>& progress = {});

/// CSV `kind,n_patches,d,k,queries,rep,seconds` preceded by `#` metadata lines.
void write_bench_csv(const BenchReport& report, const std::filesystem::path& path);
nlohmann::ordered_json bench_summary_json(const BenchReport& report);

/// Build profile and hardware thread count, for audit lines.
std::string build_profile();

}  // namespace fvit
