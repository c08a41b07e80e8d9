#include <gtest/gtest.h>

#include <fstream>

#include "fvit/bench.hpp"
#include "fvit/error.hpp"
#include "test_util.hpp"

namespace fvit {
namespace {

BenchConfig tiny() {
  BenchConfig c;
  c.grids = {2, 4};
  c.dim = 16;
  c.k = 8;
  c.queries = 3;
  c.warmups = 1;
  c.reps = 5;
  c.heads = 2;
  c.sigma = 0.3;
  c.seed = 3;
  return c;
}

TEST(Summarize, QuartilesByLinearInterpolation) {
  TimingStats t;
  t.seconds = {5.0, 1.0, 4.0, 2.0, 3.0};
  t = summarize(t, 0.5);
  EXPECT_DOUBLE_EQ(t.median, 3.0);
  EXPECT_DOUBLE_EQ(t.q1, 2.0);
  EXPECT_DOUBLE_EQ(t.q3, 4.0);
  EXPECT_DOUBLE_EQ(t.iqr, 2.0);
  // Sample stddev sqrt(2.5) over median 3.
  EXPECT_NEAR(t.rel_stddev, std::sqrt(2.5) / 3.0, 1e-15);
  EXPECT_TRUE(t.unstable);  // 0.527 > 0.5
  EXPECT_FALSE(summarize(t, 0.53).unstable);

  TimingStats even;
  even.seconds = {1.0, 2.0, 3.0, 4.0};
  even = summarize(even, 0.5);
  EXPECT_DOUBLE_EQ(even.median, 2.5);
  EXPECT_DOUBLE_EQ(even.q1, 1.75);
  EXPECT_DOUBLE_EQ(even.q3, 3.25);
}

TEST(Summarize, FlagsUnstableCases) {
  TimingStats t;
  t.seconds = {1.0, 1.0, 1.0, 1.0, 10.0};
  EXPECT_TRUE(summarize(t, 0.5).unstable);
  EXPECT_FALSE(summarize(t, 10.0).unstable);
  TimingStats flat;
  flat.seconds = {2.0, 2.0, 2.0, 2.0, 2.0};
  flat = summarize(flat, 0.5);
  EXPECT_EQ(flat.rel_stddev, 0.0);
  EXPECT_FALSE(flat.unstable);
}

TEST(Slope, RecoversPowerLaws) {
  const std::vector<double> n{16, 64, 256};
  for (double p : {0.0, 1.0, 2.0, 1.5}) {
    std::vector<double> y;
    for (double x : n) y.push_back(3.0 * std::pow(x, p));
    EXPECT_NEAR(fit_loglog_slope(n, y), p, 1e-12);
  }
  EXPECT_THROW(fit_loglog_slope({1.0}, {1.0}), ConfigError);
  EXPECT_THROW(fit_loglog_slope({1.0, 2.0}, {1.0, 0.0}), NumericError);
  EXPECT_THROW(fit_loglog_slope({2.0, 2.0}, {1.0, 3.0}), NumericError);
}

TEST(BenchConfig, SuitesAndValidation) {
  const BenchConfig s = scaling_suite();
  EXPECT_EQ(s.grids, (std::vector<int>{4, 8, 16}));
  EXPECT_EQ(s.dim, 512);
  EXPECT_TRUE(s.emd.sinkhorn.fixed_iterations);
  const BenchConfig w = wallclock_suite();
  EXPECT_EQ(w.grids, (std::vector<int>{8}));
  EXPECT_EQ(w.k, 100);
  EXPECT_EQ(w.queries, 100);
  BenchConfig bad = tiny();
  bad.reps = 4;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = tiny();
  bad.kinds.clear();
  EXPECT_THROW(validate(bad), ConfigError);
  bad = tiny();
  bad.workers = 0;
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(BenchInputs, ShapesAndShortlists) {
  const BenchConfig c = tiny();
  const BenchInputs in = make_bench_inputs(4, c);
  EXPECT_EQ(in.queries.size(), 3u);
  EXPECT_EQ(in.gallery[0].patches.rows(), 16);
  EXPECT_EQ(in.gallery[0].dim(), 16);
  ASSERT_EQ(in.stage1.size(), 3u);
  EXPECT_EQ(in.stage1[0].size(), in.gallery.size());
  EXPECT_EQ(in.model.config.grid, 4);
}

// Timing must not change what stage 2 computes.
TEST(TimeStage2, ResultsEqualThePipeline) {
  const BenchConfig c = tiny();
  const BenchInputs in = make_bench_inputs(4, c);
  for (RerankerKind kind : {RerankerKind::None, RerankerKind::Emd, RerankerKind::H2L}) {
    std::vector<RankingResult> timed;
    const TimingStats t = time_stage2(kind, in, c, &timed);
    EXPECT_EQ(t.seconds.size(), 5u);
    EXPECT_EQ(t.n_patches, 16);
    PipelineConfig pc;
    pc.k = c.k;
    pc.reranker = kind;
    pc.emd = c.emd;
    pc.weights = &in.model;
    const auto direct = run_pipeline(in.queries, in.gallery, pc);
    ASSERT_EQ(timed.size(), direct.size());
    for (std::size_t q = 0; q < timed.size(); ++q) {
      for (std::size_t i = 0; i < direct[q].ranking.size(); ++i) {
        EXPECT_EQ(timed[q].ranking[i].gallery_index, direct[q].ranking[i].gallery_index);
        EXPECT_EQ(timed[q].ranking[i].blended, direct[q].ranking[i].blended);
      }
    }
  }
}

TEST(TimeStage2, NoneKindCostsAlmostNothing) {
  const BenchConfig c = tiny();
  const BenchInputs in = make_bench_inputs(4, c);
  const TimingStats none = time_stage2(RerankerKind::None, in, c);
  const TimingStats emd = time_stage2(RerankerKind::Emd, in, c);
  EXPECT_LT(none.median, 0.01);
  EXPECT_LT(none.median, emd.median);
}

TEST(RunBench, CsvMetadataAndSummary) {
  test::TempDir dir("bench");
  const BenchReport r = run_bench(tiny());
  EXPECT_EQ(r.cases.size(), 6u);
  write_bench_csv(r, dir / "b.csv");
  std::ifstream in(dir / "b.csv");
  std::string meta, header, line;
  std::getline(in, meta);
  std::getline(in, header);
  EXPECT_EQ(meta.rfind("# ", 0), 0u);
  for (const char* key : {"workers=1", "hardware_threads=", "build=", "warmups=1", "sinkhorn_fixed=1"}) {
    EXPECT_NE(meta.find(key), std::string::npos) << key;
  }
  EXPECT_EQ(header, "kind,n_patches,d,k,queries,rep,seconds");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 30);
  const auto j = bench_summary_json(r);
  EXPECT_EQ(j["cases"].size(), 6u);
  EXPECT_EQ(j["build"], build_profile());
  EXPECT_GE(j["stage1_seconds"].get<double>(), 0.0);
}

}  // namespace
}  // namespace fvit
