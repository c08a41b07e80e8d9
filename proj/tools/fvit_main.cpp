// fvit: batch entry point for generation, ranking, evaluation, training,
// benchmarking and heatmap export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fvit/bench.hpp"
#include "fvit/error.hpp"
#include "fvit/explain.hpp"
#include "fvit/pipeline.hpp"
#include "fvit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw fvit::FormatError(fvit::FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw fvit::FormatError(fvit::FormatError::Kind::Io, "write failed: " + path.string());
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  fvit::SynthConfig cfg;
  std::string occlusion = "mask";
  fs::path out;
};

void run_gen(const GenArgs& a) {
  fvit::SynthConfig cfg = a.cfg;
  cfg.occlusion_kind = fvit::occlusion_from_string(a.occlusion);
  const fvit::SyntheticSet s = fvit::generate_synthetic(cfg);
  fvit::save_gallery(s.gallery, with_suffix(a.out, ".gallery"));
  fvit::save_gallery(s.queries, with_suffix(a.out, ".queries"));
  std::printf("wrote %zu gallery records and %zu queries (%d x %d patches, d = %d)\n", s.gallery.size(),
              s.queries.size(), cfg.grid, cfg.grid, cfg.dim);
}

struct RankArgs {
  fs::path gallery, queries, out, weights;
  std::string reranker = "none";
  int k = 100;
  double alpha = 0.7;
  bool no_normalize = false;
  bool no_pos = false;
  std::string scheme = "cc";
  double epsilon = 0.01;
  int max_iters = 500;
  bool fixed_iters = false;
  int workers = default_workers();
};

void run_rank(const RankArgs& a, bool stage2) {
  fvit::PipelineConfig pc;
  pc.workers = a.workers;
  fvit::ModelWeights weights;
  if (stage2) {
    pc.reranker = fvit::reranker_from_string(a.reranker);
    if (pc.reranker == fvit::RerankerKind::None) throw fvit::ConfigError("rerank: --reranker must be emd or h2l");
    const bool h2l = pc.reranker == fvit::RerankerKind::H2L;
    if (h2l && a.weights.empty()) throw fvit::ConfigError("--reranker h2l requires --weights");
    if (!h2l && !a.weights.empty()) throw fvit::ConfigError("--weights only applies to --reranker h2l");
    if (!h2l && a.no_pos) throw fvit::ConfigError("--no-pos only applies to --reranker h2l");
    pc.k = a.k;
    pc.alpha = a.alpha;
    pc.normalize = !a.no_normalize;
    if (a.scheme == "uniform") {
      pc.emd.scheme = fvit::WeightScheme::Uniform;
    } else if (a.scheme == "cc") {
      pc.emd.scheme = fvit::WeightScheme::CrossCorrelation;
    } else {
      throw fvit::ConfigError("--scheme must be uniform or cc");
    }
    pc.emd.sinkhorn.epsilon = a.epsilon;
    pc.emd.sinkhorn.max_iters = a.max_iters;
    pc.emd.sinkhorn.fixed_iterations = a.fixed_iters;
    if (h2l) {
      weights = fvit::load_weights(a.weights);
      if (weights.config.variant != fvit::Variant::H2L) {
        throw fvit::ConfigError("--weights holds a " + fvit::to_string(weights.config.variant) + " model, rerank needs H2L");
      }
      if (a.no_pos) weights.config.use_pos = false;
      pc.weights = &weights;
    }
  }
  fvit::validate(pc);
  const fvit::Gallery g = fvit::load_gallery(a.gallery);
  const fvit::QuerySet q = fvit::load_gallery(a.queries);
  const auto results = fvit::run_pipeline(q, g, pc);
  fvit::write_results_csv(results, g, a.out);

  int flagged = 0, unconverged = 0;
  for (const auto& r : results) {
    flagged += r.flagged;
    unconverged += r.unconverged;
  }
  ordered_json meta;
  meta["command"] = stage2 ? "rerank" : "rank";
  meta["gallery"] = a.gallery.string();
  meta["queries"] = a.queries.string();
  meta["reranker"] = fvit::to_string(pc.reranker);
  if (stage2) {
    meta["k"] = pc.k;
    meta["alpha"] = pc.alpha;
    meta["normalize"] = pc.normalize;
    if (pc.reranker == fvit::RerankerKind::Emd) {
      meta["scheme"] = a.scheme;
      meta["epsilon"] = a.epsilon;
      meta["max_iters"] = a.max_iters;
      meta["fixed_iters"] = a.fixed_iters;
    } else {
      meta["weights"] = a.weights.string();
      meta["use_pos"] = weights.config.use_pos;
    }
  }
  meta["workers"] = pc.workers;
  meta["flagged"] = flagged;
  meta["unconverged"] = unconverged;
  write_text(with_suffix(a.out, ".meta.json"), meta.dump(2) + "\n");
  std::printf("ranked %zu queries against %zu records", q.size(), g.size());
  if (flagged > 0) std::printf(" (%d candidates flagged)", flagged);
  if (unconverged > 0) std::printf(" (%d Sinkhorn runs unconverged)", unconverged);
  std::printf("\n");
}

struct EvalArgs {
  fs::path results, gallery, out, csv;
};

void run_eval(const EvalArgs& a) {
  const auto results = fvit::read_results_csv(a.results);
  const fvit::Gallery g = fvit::load_gallery(a.gallery);
  const fvit::EvalReport rep = fvit::evaluate(results, g);
  const std::string json = fvit::report_json(rep);
  write_text(a.out, json + "\n");
  fs::path csv = a.csv;
  if (csv.empty()) {
    csv = fs::path(a.out).replace_extension(".csv");
    // Never clobber the results file being evaluated.
    if (fs::weakly_canonical(csv) == fs::weakly_canonical(a.results)) csv = with_suffix(a.out, ".csv");
  }
  fvit::write_report_csv(rep, csv);
  std::printf("%s\n", json.c_str());
}

struct TrainArgs {
  fs::path config, data, out;
};

// Config layout: {"model": {...}, "train": {...}, "init_seed": N}. Model
// grid and dim default to the data's shape, out_dim to dim.
void run_train(const TrainArgs& a) {
  std::ifstream in(a.config);
  if (!in) throw fvit::FormatError(fvit::FormatError::Kind::Io, "cannot open " + a.config.string());
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw fvit::ConfigError("train config: " + std::string(e.what()));
  }
  if (!cfg.is_object()) throw fvit::ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : cfg.items()) {
    if (key != "model" && key != "train" && key != "init_seed") throw fvit::ConfigError("train config: unknown key '" + key + "'");
  }
  const fvit::Gallery data = fvit::load_gallery(a.data);
  if (data.empty()) throw fvit::ConfigError("train-toy: --data is empty");
  nlohmann::json model = cfg.value("model", nlohmann::json::object());
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(data[0].patches.rows()))));
  if (!model.contains("grid")) model["grid"] = grid;
  if (!model.contains("dim")) model["dim"] = data[0].dim();
  if (!model.contains("out_dim")) model["out_dim"] = model["dim"];
  const fvit::ModelConfig mc = fvit::model_config_from_json(model);
  const fvit::TrainConfig tc = fvit::train_config_from_json(cfg.value("train", nlohmann::json::object()));
  const std::uint64_t init_seed = cfg.value("init_seed", std::uint64_t{0});

  const fvit::TrainResult r = fvit::train(fvit::init_random(mc, init_seed), data, tc);
  fvit::save_weights(r.weights, a.out);
  ordered_json hist;
  hist["model"] = fvit::to_json(mc);
  hist["train"] = fvit::to_json(tc);
  hist["init_seed"] = init_seed;
  hist["data"] = a.data.string();
  hist["history"] = fvit::to_json(r.history);
  write_text(with_suffix(a.out, ".history.json"), hist.dump(2) + "\n");
  for (const auto& e : r.history.epochs) {
    std::printf("epoch %3d  lr %.0e  loss %.4f  probe %.4f  train acc %.3f  held-out %.3f / occluded %.3f\n", e.epoch,
                e.lr, e.train_loss, e.probe_loss, e.train_accuracy, e.heldout_accuracy, e.heldout_occluded_accuracy);
  }
  if (r.history.diverged) {
    std::fprintf(stderr, "warning: %s\n", r.history.message.c_str());
    throw fvit::NumericError("training diverged");
  }
}

struct BenchArgs {
  std::string suite = "scaling";
  fs::path out;
  int workers = 1;
  int reps = 5;
  int queries = 0;
  int k = 0;
  int dim = 0;
  std::string grids;
  std::string kinds;
  std::uint64_t seed = 0;
};

void run_bench_cmd(const BenchArgs& a) {
  fvit::BenchConfig cfg;
  if (a.suite == "scaling") {
    cfg = fvit::scaling_suite();
  } else if (a.suite == "wallclock") {
    cfg = fvit::wallclock_suite();
  } else {
    throw fvit::ConfigError("--suite must be scaling or wallclock");
  }
  cfg.workers = a.workers;
  cfg.reps = a.reps;
  cfg.seed = a.seed;
  if (a.queries > 0) cfg.queries = a.queries;
  if (a.k > 0) cfg.k = a.k;
  if (a.dim > 0) cfg.dim = a.dim;
  if (!a.grids.empty()) {
    cfg.grids.clear();
    for (const std::string& g : split_commas(a.grids)) cfg.grids.push_back(std::stoi(g));
  }
  if (!a.kinds.empty()) {
    cfg.kinds.clear();
    for (const std::string& k : split_commas(a.kinds)) cfg.kinds.push_back(fvit::reranker_from_string(k));
  }
  fvit::validate(cfg);
  const fvit::BenchReport rep = fvit::run_bench(cfg, [](const fvit::TimingStats& t) {
    std::printf("%-4s n=%4d d=%4d k=%4d  median %.4fs  iqr %.4fs%s\n", fvit::to_string(t.kind).c_str(), t.n_patches, t.d,
                t.k, t.median, t.iqr, t.unstable ? "  UNSTABLE" : "");
    std::fflush(stdout);
  });
  fvit::write_bench_csv(rep, a.out);
  write_text(fs::path(a.out).replace_extension(".summary.json"), fvit::bench_summary_json(rep).dump(2) + "\n");
  for (const auto& [kind, slope] : rep.slopes) std::printf("slope %s %.3f\n", fvit::to_string(kind).c_str(), slope);
}

struct ExplainArgs {
  fs::path gallery, queries, flow;
  int query_idx = 0;
  int gallery_idx = 0;
  std::string out;
  int side = 256;
};

void run_explain(const ExplainArgs& a) {
  const fvit::Gallery g = fvit::load_gallery(a.gallery);
  const fvit::Gallery q = a.queries.empty() ? g : fvit::load_gallery(a.queries);
  const auto pick = [](const fvit::Gallery& set, int i, const char* what) -> const fvit::FaceRecord& {
    if (i < 0 || static_cast<std::size_t>(i) >= set.size()) {
      throw fvit::ConfigError(std::string(what) + " index " + std::to_string(i) + " out of range (size " +
                              std::to_string(set.size()) + ")");
    }
    return set[static_cast<std::size_t>(i)];
  };
  const fvit::FaceRecord& query = pick(q, a.query_idx, "query");
  const fvit::FaceRecord& mate = pick(g, a.gallery_idx, "gallery");
  const fvit::HeatmapPair h = fvit::cc_heatmap(query, mate);
  const std::vector<std::string> outs = split_commas(a.out);
  if (outs.empty()) throw fvit::ConfigError("--out needs at least one path");
  for (const std::string& o : outs) {
    const std::string ext = fs::path(o).extension().string();
    if (ext == ".pgm") {
      fvit::write_heatmap_pgm(h.a_to_b.normalized, o, a.side);
    } else if (ext == ".csv") {
      fvit::write_heatmap_csv(h.a_to_b.raw, o);
    } else {
      throw fvit::ConfigError("--out entries must end in .pgm or .csv: " + o);
    }
  }
  if (!a.flow.empty()) fvit::write_flow_csv(fvit::emd_match(query, mate).transport.flow, a.flow);
  std::printf("query %d (identity %d) vs gallery %d (identity %d)\n", a.query_idx, query.identity, a.gallery_idx,
              mate.identity);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvit: occlusion-robust two-stage face retrieval over patch embeddings"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-synth", "Generate a synthetic occluded-identity gallery and query set");
  c_gen->add_option("--identities", gen.cfg.n_identities, "Number of identities")->capture_default_str();
  c_gen->add_option("--per-id", gen.cfg.records_per_identity, "Gallery records per identity")->capture_default_str();
  c_gen->add_option("--queries-per-id", gen.cfg.queries_per_identity, "Queries per identity")->capture_default_str();
  c_gen->add_option("--sigma", gen.cfg.sigma, "Intra-class patch noise")->capture_default_str();
  c_gen->add_option("--occluded-frac", gen.cfg.occluded_fraction, "Share of occluded queries")->capture_default_str();
  c_gen->add_option("--occlusion", gen.occlusion, "mask or sunglasses")->capture_default_str();
  c_gen->add_option("--grid", gen.cfg.grid, "Patch grid side")->capture_default_str();
  c_gen->add_option("--dim", gen.cfg.dim, "Patch embedding width")->capture_default_str();
  c_gen->add_option("--seed", gen.cfg.seed, "Generator seed")->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output prefix; writes PREFIX.gallery and PREFIX.queries")->required();

  RankArgs rank;
  auto* c_rank = app.add_subcommand("rank", "Stage-1 cosine ranking");
  c_rank->add_option("--gallery", rank.gallery)->required()->check(CLI::ExistingFile);
  c_rank->add_option("--queries", rank.queries)->required()->check(CLI::ExistingFile);
  c_rank->add_option("--out", rank.out, "Results CSV")->required();
  c_rank->add_option("--workers", rank.workers)->capture_default_str()->check(CLI::PositiveNumber);

  RankArgs rr;
  auto* c_rr = app.add_subcommand("rerank", "Stage-1 ranking followed by patch-level re-ranking of the top k");
  c_rr->add_option("--gallery", rr.gallery)->required()->check(CLI::ExistingFile);
  c_rr->add_option("--queries", rr.queries)->required()->check(CLI::ExistingFile);
  c_rr->add_option("--reranker", rr.reranker, "emd or h2l")->required();
  c_rr->add_option("--weights", rr.weights, "H2L weights file")->check(CLI::ExistingFile);
  c_rr->add_option("--k", rr.k, "Shortlist size")->capture_default_str();
  c_rr->add_option("--alpha", rr.alpha, "Weight on the stage-2 score")->capture_default_str();
  c_rr->add_flag("--no-normalize", rr.no_normalize, "Blend raw scores instead of min-max normalized ones");
  c_rr->add_flag("--no-pos", rr.no_pos, "Drop positional embeddings in the H2L model");
  c_rr->add_option("--scheme", rr.scheme, "EMD marginals: uniform or cc")->capture_default_str();
  c_rr->add_option("--epsilon", rr.epsilon, "Sinkhorn regularization")->capture_default_str();
  c_rr->add_option("--max-iters", rr.max_iters, "Sinkhorn iteration cap")->capture_default_str();
  c_rr->add_flag("--fixed-iters", rr.fixed_iters, "Always run --max-iters Sinkhorn sweeps");
  c_rr->add_option("--out", rr.out, "Results CSV")->required();
  c_rr->add_option("--workers", rr.workers)->capture_default_str()->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Retrieval metrics from a results CSV");
  c_eval->add_option("--results", ev.results)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--gallery", ev.gallery)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", ev.out, "Report JSON")->required();
  c_eval->add_option("--csv", ev.csv, "Per-query CSV (default: --out with .csv extension, or OUT.csv if that is the results file)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train-toy", "Train a small hybrid ViT on a synthetic gallery");
  c_train->add_option("--config", tr.config, "Training JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Training gallery")->required()->check(CLI::ExistingFile);
  c_train->add_option("--out", tr.out, "Weights file; history goes to OUT.history.json")->required();

  BenchArgs be;
  auto* c_bench = app.add_subcommand("bench", "Time stage-2 re-ranking");
  c_bench->add_option("--suite", be.suite, "scaling or wallclock")->capture_default_str();
  c_bench->add_option("--out", be.out, "Per-rep CSV; summary goes to OUT with .summary.json")->required();
  c_bench->add_option("--workers", be.workers)->capture_default_str()->check(CLI::PositiveNumber);
  c_bench->add_option("--reps", be.reps, "Measured repetitions (>= 5)")->capture_default_str();
  c_bench->add_option("--queries", be.queries, "Override the suite's query count");
  c_bench->add_option("--k", be.k, "Override the suite's shortlist size");
  c_bench->add_option("--dim", be.dim, "Override the embedding width");
  c_bench->add_option("--grids", be.grids, "Comma-separated grid sides, e.g. 4,8,16");
  c_bench->add_option("--kinds", be.kinds, "Comma-separated rerankers: none, emd, h2l");
  c_bench->add_option("--seed", be.seed)->capture_default_str();

  ExplainArgs ex;
  auto* c_ex = app.add_subcommand("explain", "Cross-correlation heatmap of a query against a gallery record");
  c_ex->add_option("--gallery", ex.gallery)->required()->check(CLI::ExistingFile);
  c_ex->add_option("--queries", ex.queries, "Query set (default: take the query from the gallery)")
      ->check(CLI::ExistingFile);
  c_ex->add_option("--query-idx", ex.query_idx)->required();
  c_ex->add_option("--gallery-idx", ex.gallery_idx)->required();
  c_ex->add_option("--out", ex.out, "heat.pgm, heat.csv or both, comma-separated")->required();
  c_ex->add_option("--side", ex.side, "PGM side in pixels")->capture_default_str();
  c_ex->add_option("--flow", ex.flow, "Also write the EMD transport plan as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_gen) run_gen(gen);
    if (*c_rank) run_rank(rank, false);
    if (*c_rr) run_rank(rr, true);
    if (*c_eval) run_eval(ev);
    if (*c_train) run_train(tr);
    if (*c_bench) run_bench_cmd(be);
    if (*c_ex) run_explain(ex);
  } catch (const fvit::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
