#include "fvit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "fvit/error.hpp"
#include "parallel.hpp"

#ifndef FVIT_BUILD_PROFILE
#define FVIT_BUILD_PROFILE "unknown"
#endif

namespace fvit {

namespace {

constexpr int kBenchIdentities = 20;

using Clock = std::chrono::steady_clock;

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Gallery first_n(const Gallery& g, std::size_t n) {
  Gallery out;
  for (std::size_t i = 0; i < std::min(n, g.size()); ++i) out.add(g[i]);
  return out;
}

PipelineConfig pipeline_config(RerankerKind kind, const BenchInputs& in, const BenchConfig& cfg) {
  PipelineConfig pc;
  pc.k = cfg.k;
  pc.reranker = kind;
  pc.emd = cfg.emd;
  pc.weights = kind == RerankerKind::H2L ? &in.model : nullptr;
  pc.workers = cfg.workers;
  return pc;
}

// One pass of stage 2 over `n` queries with a fresh reranker, so cached
// model blocks are rebuilt (and paid for) on every pass.
std::vector<RankingResult> stage2_pass(RerankerKind kind, const BenchInputs& in, const BenchConfig& cfg, std::size_t n) {
  const PipelineConfig pc = pipeline_config(kind, in, cfg);
  const Reranker reranker(in.gallery, pc);
  std::vector<RankingResult> out(n);
  detail::parallel_for(n, cfg.workers, [&](std::size_t i) {
    out[i] = stage2_rerank(static_cast<int>(i), in.queries[i], in.gallery, in.stage1[i], pc, &reranker);
  });
  return out;
}

}  // namespace

BenchConfig scaling_suite() {
  BenchConfig c;
  c.suite = "scaling";
  c.kinds = {RerankerKind::Emd, RerankerKind::H2L};
  c.grids = {4, 8, 16};
  c.k = 10;
  c.queries = 2;
  return c;
}

BenchConfig wallclock_suite() {
  BenchConfig c;
  c.suite = "wallclock";
  c.grids = {8};
  c.k = 100;
  c.queries = 100;
  return c;
}

void validate(const BenchConfig& cfg) {
  if (cfg.kinds.empty() || cfg.grids.empty()) throw ConfigError("bench: need at least one kind and one grid");
  if (cfg.dim < 1 || cfg.k < 1 || cfg.queries < 1) throw ConfigError("bench: dim, k and queries must be positive");
  if (cfg.warmups < 0) throw ConfigError("bench: warmups must be >= 0");
  if (cfg.reps < 5) throw ConfigError("bench: at least 5 measured reps are required");
  if (cfg.workers < 1) throw ConfigError("bench: workers must be >= 1");
  for (int g : cfg.grids) {
    if (g < 1) throw ConfigError("bench: grid sizes must be positive");
  }
}

BenchInputs make_bench_inputs(int grid, const BenchConfig& cfg) {
  SynthConfig sc;
  sc.n_identities = kBenchIdentities;
  sc.records_per_identity = std::max(10, (cfg.k + kBenchIdentities - 1) / kBenchIdentities);
  sc.queries_per_identity = (cfg.queries + kBenchIdentities - 1) / kBenchIdentities;
  sc.sigma = cfg.sigma;
  sc.seed = cfg.seed;
  sc.grid = grid;
  sc.dim = cfg.dim;
  SyntheticSet data = generate_synthetic(sc);

  BenchInputs in;
  in.grid = grid;
  in.dim = cfg.dim;
  in.gallery = std::move(data.gallery);
  in.queries = first_n(data.queries, static_cast<std::size_t>(cfg.queries));
  in.stage1.resize(in.queries.size());
  for (std::size_t i = 0; i < in.queries.size(); ++i) in.stage1[i] = stage1_rank(in.queries[i], in.gallery);

  if (std::find(cfg.kinds.begin(), cfg.kinds.end(), RerankerKind::H2L) != cfg.kinds.end()) {
    ModelConfig mc;
    mc.variant = Variant::H2L;
    mc.depth = cfg.depth;
    mc.heads = cfg.heads;
    mc.dim = cfg.dim;
    mc.grid = grid;
    mc.out_dim = cfg.dim;
    in.model = init_random(mc, cfg.seed);
  }
  return in;
}

TimingStats summarize(TimingStats t, double instability_limit) {
  if (t.seconds.empty()) return t;
  t.median = quantile(t.seconds, 0.5);
  t.q1 = quantile(t.seconds, 0.25);
  t.q3 = quantile(t.seconds, 0.75);
  t.iqr = t.q3 - t.q1;
  if (t.seconds.size() > 1 && t.median > 0.0) {
    double mean = 0.0;
    for (double s : t.seconds) mean += s;
    mean /= static_cast<double>(t.seconds.size());
    double ss = 0.0;
    for (double s : t.seconds) ss += (s - mean) * (s - mean);
    t.rel_stddev = std::sqrt(ss / static_cast<double>(t.seconds.size() - 1)) / t.median;
  }
  t.unstable = t.rel_stddev > instability_limit;
  return t;
}

TimingStats time_stage2(RerankerKind kind, const BenchInputs& in, const BenchConfig& cfg,
                        std::vector<RankingResult>* results) {
  validate(cfg);
  TimingStats t;
  t.kind = kind;
  t.n_patches = in.grid * in.grid;
  t.d = in.dim;
  t.k = std::min<int>(cfg.k, static_cast<int>(in.gallery.size()));
  t.queries = static_cast<int>(in.queries.size());
  for (int w = 0; w < cfg.warmups; ++w) stage2_pass(kind, in, cfg, 1);
  for (int r = 0; r < cfg.reps; ++r) {
    const auto start = Clock::now();
    std::vector<RankingResult> out = stage2_pass(kind, in, cfg, in.queries.size());
    t.seconds.push_back(std::chrono::duration<double>(Clock::now() - start).count());
    if (results != nullptr && r + 1 == cfg.reps) *results = std::move(out);
  }
  return summarize(std::move(t), cfg.instability_limit);
}

TimingStats time_reranker(RerankerKind kind, int n_patches, int d, int n_queries, int k, int reps,
                          const BenchConfig& base) {
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_patches))));
  if (grid * grid != n_patches) throw ConfigError("time_reranker: n_patches must be a square");
  BenchConfig cfg = base;
  cfg.kinds = {kind};
  cfg.grids = {grid};
  cfg.dim = d;
  cfg.queries = n_queries;
  cfg.k = k;
  cfg.reps = reps;
  return time_stage2(kind, make_bench_inputs(grid, cfg), cfg);
}

double fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("fit_loglog_slope: need >= 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw NumericError("fit_loglog_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (!(sxx > 0.0)) throw NumericError("fit_loglog_slope: x values must differ");
  return sxy / sxx;
}

BenchReport run_bench(const BenchConfig& cfg, const std::function<void(const TimingStats&)>& progress) {
  validate(cfg);
  BenchReport report;
  report.config = cfg;
  for (int grid : cfg.grids) {
    const BenchInputs in = make_bench_inputs(grid, cfg);
    const auto start = Clock::now();
    for (std::size_t i = 0; i < in.queries.size(); ++i) (void)stage1_rank(in.queries[i], in.gallery);
    report.stage1_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    for (RerankerKind kind : cfg.kinds) {
      report.cases.push_back(time_stage2(kind, in, cfg));
      if (progress) progress(report.cases.back());
    }
  }
  for (RerankerKind kind : cfg.kinds) {
    std::vector<double> xs, ys;
    for (const TimingStats& t : report.cases) {
      if (t.kind == kind && !t.unstable && t.median > 0.0) {
        xs.push_back(t.n_patches);
        ys.push_back(t.median);
      }
    }
    if (xs.size() >= 2) report.slopes[kind] = fit_loglog_slope(xs, ys);
  }
  return report;
}

std::string build_profile() { return FVIT_BUILD_PROFILE; }

void write_bench_csv(const BenchReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  const BenchConfig& c = report.config;
  out << "# suite=" << c.suite << " workers=" << c.workers
      << " hardware_threads=" << std::thread::hardware_concurrency() << " build=" << build_profile()
      << " warmups=" << c.warmups << " sinkhorn_eps=" << c.emd.sinkhorn.epsilon
      << " sinkhorn_iters=" << c.emd.sinkhorn.max_iters
      << " sinkhorn_fixed=" << (c.emd.sinkhorn.fixed_iterations ? 1 : 0) << " h2l_depth=" << c.depth
      << " h2l_heads=" << c.heads << " seed=" << c.seed << '\n';
  out << "kind,n_patches,d,k,queries,rep,seconds\n";
  char buf[32];
  for (const TimingStats& t : report.cases) {
    for (std::size_t r = 0; r < t.seconds.size(); ++r) {
      std::snprintf(buf, sizeof buf, "%.6f", t.seconds[r]);
      out << to_string(t.kind) << ',' << t.n_patches << ',' << t.d << ',' << t.k << ',' << t.queries << ',' << r << ','
          << buf << '\n';
    }
  }
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

nlohmann::ordered_json bench_summary_json(const BenchReport& report) {
  nlohmann::ordered_json cases = nlohmann::ordered_json::array();
  for (const TimingStats& t : report.cases) {
    cases.push_back({{"kind", to_string(t.kind)},
                     {"n_patches", t.n_patches},
                     {"d", t.d},
                     {"k", t.k},
                     {"queries", t.queries},
                     {"median", t.median},
                     {"q1", t.q1},
                     {"q3", t.q3},
                     {"iqr", t.iqr},
                     {"rel_stddev", t.rel_stddev},
                     {"unstable", t.unstable}});
  }
  nlohmann::ordered_json slopes = nlohmann::ordered_json::object();
  for (const auto& [kind, s] : report.slopes) slopes[to_string(kind)] = s;
  nlohmann::ordered_json j;
  j["suite"] = report.config.suite;
  j["workers"] = report.config.workers;
  j["hardware_threads"] = std::thread::hardware_concurrency();
  j["build"] = build_profile();
  j["stage1_seconds"] = report.stage1_seconds;
  j["cases"] = cases;
  j["slopes"] = slopes;
  return j;
}

}  // namespace fvit
