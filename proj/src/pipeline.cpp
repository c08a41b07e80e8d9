#include "fvit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fvit/error.hpp"
#include "parallel.hpp"

namespace fvit {

namespace {

std::vector<double> min_max(std::span<const double> x) {
  std::vector<double> out(x.size(), 0.0);
  if (x.empty()) return out;
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace

std::string to_string(RerankerKind k) {
  switch (k) {
    case RerankerKind::None: return "none";
    case RerankerKind::Emd: return "emd";
    case RerankerKind::H2L: return "h2l";
  }
  return "unknown";
}

RerankerKind reranker_from_string(const std::string& s) {
  if (s == "none") return RerankerKind::None;
  if (s == "emd") return RerankerKind::Emd;
  if (s == "h2l") return RerankerKind::H2L;
  throw ConfigError("unknown reranker '" + s + "' (expected none, emd or h2l)");
}

void validate(const PipelineConfig& cfg) {
  if (cfg.k < 1) throw ConfigError("pipeline: k must be >= 1");
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("pipeline: alpha must lie in [0, 1]");
  if (cfg.workers < 1) throw ConfigError("pipeline: workers must be >= 1");
  if (cfg.reranker == RerankerKind::H2L) {
    if (cfg.weights == nullptr) throw ConfigError("pipeline: the h2l reranker needs model weights");
    if (cfg.weights->config.variant != Variant::H2L) {
      throw ConfigError("pipeline: the h2l reranker needs H2L weights, got " + to_string(cfg.weights->config.variant));
    }
  }
}

std::vector<ScoredIndex> stage1_rank(const FaceRecord& q, const Gallery& g) {
  if (g.empty()) throw ConfigError("stage1_rank: empty gallery");
  const double qn = q.image_vec.norm();
  if (!(qn > 0.0)) throw NumericError("stage1_rank: zero-norm query embedding");
  if (q.image_vec.cols() != g[0].image_vec.cols()) throw DimensionError("stage1_rank: embedding width mismatch");
  std::vector<ScoredIndex> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Matrix& v = g[i].image_vec;
    const double gn = v.norm();
    if (!(gn > 0.0)) throw NumericError("stage1_rank: zero-norm gallery embedding at index " + std::to_string(i));
    out[i] = {static_cast<int>(i), q.image_vec.cwiseProduct(v).sum() / (qn * gn)};
  }
  std::stable_sort(out.begin(), out.end(), [](const ScoredIndex& a, const ScoredIndex& b) { return a.score > b.score; });
  return out;
}

std::vector<double> blend_scores(std::span<const double> stage1, std::span<const double> stage2, double alpha,
                                 bool normalize) {
  if (stage1.size() != stage2.size()) throw DimensionError("blend_scores: length mismatch");
  std::vector<double> s1(stage1.begin(), stage1.end());
  std::vector<double> s2(stage2.begin(), stage2.end());
  if (normalize) {
    s1 = min_max(s1);
    s2 = min_max(s2);
  }
  std::vector<double> out(s1.size());
  for (std::size_t i = 0; i < s1.size(); ++i) out[i] = alpha * s2[i] + (1.0 - alpha) * s1[i];
  return out;
}

// ---------------------------------------------------------------------------
// Reranker

struct Reranker::Impl {
  const Gallery& gallery;
  PipelineConfig cfg;
  std::unique_ptr<H2LScorer> scorer;
  std::vector<std::unique_ptr<H2LScorer::Block>> blocks;
  std::unique_ptr<std::once_flag[]> block_once;

  Impl(const Gallery& g, const PipelineConfig& c) : gallery(g), cfg(c) {}

  const H2LScorer::Block& block(int index) {
    const auto i = static_cast<std::size_t>(index);
    std::call_once(block_once[i], [&] {
      blocks[i] = std::make_unique<H2LScorer::Block>(scorer->prepare(gallery[i], 1));
    });
    return *blocks[i];
  }
};

Reranker::Reranker(const Gallery& g, const PipelineConfig& cfg) : impl_(std::make_unique<Impl>(g, cfg)) {
  validate(cfg);
  if (cfg.reranker == RerankerKind::H2L) {
    impl_->scorer = std::make_unique<H2LScorer>(*cfg.weights);
    impl_->blocks.resize(g.size());
    impl_->block_once = std::make_unique<std::once_flag[]>(g.size());
  }
}

Reranker::~Reranker() = default;

void Reranker::prepare_gallery(std::span<const int> indices) {
  if (!impl_->scorer) return;
  detail::parallel_for(indices.size(), impl_->cfg.workers, [&](std::size_t i) {
    try {
      impl_->block(indices[i]);
    } catch (const Error&) {
      // left for score() to flag
    }
  });
}

std::vector<std::optional<double>> Reranker::score(const FaceRecord& q, std::span<const int> candidates,
                                                   int* unconverged) const {
  std::vector<std::optional<double>> out(candidates.size());
  int stalled = 0;
  switch (impl_->cfg.reranker) {
    case RerankerKind::None:
      break;
    case RerankerKind::Emd:
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        try {
          const EmdMatch m = emd_match(q, impl_->gallery[static_cast<std::size_t>(candidates[i])], impl_->cfg.emd);
          if (!m.transport.converged) ++stalled;
          out[i] = m.similarity;
        } catch (const Error&) {
          out[i].reset();
        }
      }
      break;
    case RerankerKind::H2L: {
      std::optional<H2LScorer::Block> first;
      try {
        first = impl_->scorer->prepare(q, 0);
      } catch (const Error&) {
        return out;  // query unusable: every candidate is flagged
      }
      std::vector<const H2LScorer::Block*> ok_blocks;
      std::vector<std::size_t> ok_slots;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        try {
          ok_blocks.push_back(&impl_->block(candidates[i]));
          ok_slots.push_back(i);
        } catch (const Error&) {
        }
      }
      try {
        const std::vector<double> s = impl_->scorer->score_batch(*first, ok_blocks);
        for (std::size_t j = 0; j < s.size(); ++j) out[ok_slots[j]] = s[j];
      } catch (const Error&) {
        // Isolate the failing candidates.
        for (std::size_t j = 0; j < ok_blocks.size(); ++j) {
          try {
            out[ok_slots[j]] = impl_->scorer->score(*first, *ok_blocks[j]).score;
          } catch (const Error&) {
          }
        }
      }
      break;
    }
  }
  if (unconverged != nullptr) *unconverged = stalled;
  return out;
}

// ---------------------------------------------------------------------------

RankingResult stage2_rerank(int query_index, const FaceRecord& q, const Gallery& g,
                            const std::vector<ScoredIndex>& stage1, const PipelineConfig& cfg,
                            const Reranker* reranker) {
  validate(cfg);
  if (stage1.size() != g.size()) throw DimensionError("stage2_rerank: stage-1 list does not cover the gallery");
  RankingResult r;
  r.query_index = query_index;
  r.query_identity = q.identity;
  const std::size_t k = std::min(static_cast<std::size_t>(cfg.k), stage1.size());

  std::vector<Candidate> shortlist(k);
  std::vector<int> indices(k);
  for (std::size_t i = 0; i < k; ++i) {
    shortlist[i].gallery_index = stage1[i].index;
    shortlist[i].stage1 = stage1[i].score;
    shortlist[i].shortlisted = true;
    indices[i] = stage1[i].index;
  }

  if (cfg.reranker != RerankerKind::None && reranker != nullptr) {
    const auto s2 = reranker->score(q, indices, &r.unconverged);
    for (std::size_t i = 0; i < k; ++i) {
      shortlist[i].stage2 = s2[i];
      shortlist[i].flagged = !s2[i].has_value();
    }
    std::vector<double> s1_all(k);
    for (std::size_t i = 0; i < k; ++i) s1_all[i] = shortlist[i].stage1;
    const std::vector<double> s1n = cfg.normalize ? min_max(s1_all) : s1_all;

    std::vector<double> s2_ok;
    for (const Candidate& c : shortlist) {
      if (c.stage2) s2_ok.push_back(*c.stage2);
    }
    const std::vector<double> s2n = cfg.normalize ? min_max(s2_ok) : s2_ok;
    std::size_t j = 0;
    for (std::size_t i = 0; i < k; ++i) {
      Candidate& c = shortlist[i];
      if (c.flagged) {
        ++r.flagged;
        c.blended = s1n[i];
      } else {
        c.blended = cfg.alpha * s2n[j++] + (1.0 - cfg.alpha) * s1n[i];
      }
    }
    // Descending blended score; equal blends fall back to the stage-1 score and
    // then to the gallery index, so alpha = 0 reproduces the stage-1 order.
    std::sort(shortlist.begin(), shortlist.end(), [](const Candidate& a, const Candidate& b) {
      if (a.blended != b.blended) return a.blended > b.blended;
      if (a.stage1 != b.stage1) return a.stage1 > b.stage1;
      return a.gallery_index < b.gallery_index;
    });
  } else {
    for (Candidate& c : shortlist) c.blended = c.stage1;
  }

  r.ranking = std::move(shortlist);
  r.ranking.reserve(stage1.size());
  for (std::size_t i = k; i < stage1.size(); ++i) {
    Candidate c;
    c.gallery_index = stage1[i].index;
    c.stage1 = stage1[i].score;
    c.blended = stage1[i].score;
    r.ranking.push_back(c);
  }
  r.predicted_identity = g[static_cast<std::size_t>(r.ranking.front().gallery_index)].identity;
  return r;
}

std::vector<RankingResult> run_pipeline(const QuerySet& queries, const Gallery& g, const PipelineConfig& cfg) {
  validate(cfg);
  if (g.empty()) throw ConfigError("pipeline: empty gallery");
  const std::size_t n = queries.size();
  std::vector<std::vector<ScoredIndex>> stage1(n);
  detail::parallel_for(n, cfg.workers, [&](std::size_t i) { stage1[i] = stage1_rank(queries[i], g); });

  std::unique_ptr<Reranker> reranker;
  if (cfg.reranker != RerankerKind::None) {
    reranker = std::make_unique<Reranker>(g, cfg);
    if (cfg.reranker == RerankerKind::H2L) {
      std::set<int> needed;
      const std::size_t k = std::min(static_cast<std::size_t>(cfg.k), g.size());
      for (const auto& s : stage1) {
        for (std::size_t j = 0; j < k; ++j) needed.insert(s[j].index);
      }
      const std::vector<int> list(needed.begin(), needed.end());
      reranker->prepare_gallery(list);
    }
  }

  std::vector<RankingResult> results(n);
  detail::parallel_for(n, cfg.workers, [&](std::size_t i) {
    results[i] = stage2_rerank(static_cast<int>(i), queries[i], g, stage1[i], cfg, reranker.get());
  });
  return results;
}

// ---------------------------------------------------------------------------
// Metrics

RetrievalMetrics retrieval_metrics(const std::vector<bool>& relevance, int r) {
  if (r < 1) throw ConfigError("retrieval_metrics: R must be >= 1");
  RetrievalMetrics m;
  m.p_at_1 = !relevance.empty() && relevance[0] ? 1.0 : 0.0;
  const std::size_t limit = std::min(relevance.size(), static_cast<std::size_t>(r));
  int hits = 0;
  double ap = 0.0;
  for (std::size_t i = 0; i < limit; ++i) {
    if (relevance[i]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  m.rp = static_cast<double>(hits) / r;
  m.m_at_r = ap / r;
  return m;
}

EvalReport evaluate(const std::vector<RankingResult>& results, const Gallery& g) {
  EvalReport report;
  const auto counts = g.id_counts();
  for (const RankingResult& res : results) {
    const auto it = counts.find(res.query_identity);
    if (it == counts.end() || it->second == 0) {
      ++report.excluded;
      continue;
    }
    std::vector<bool> rel(res.ranking.size());
    for (std::size_t i = 0; i < res.ranking.size(); ++i) {
      const auto idx = static_cast<std::size_t>(res.ranking[i].gallery_index);
      if (idx >= g.size()) throw DimensionError("evaluate: gallery index out of range");
      rel[i] = g[idx].identity == res.query_identity;
    }
    const RetrievalMetrics m = retrieval_metrics(rel, it->second);
    QueryMetrics q;
    q.query_index = res.query_index;
    q.identity = res.query_identity;
    q.predicted_identity = res.ranking.empty() ? -1 : g[static_cast<std::size_t>(res.ranking[0].gallery_index)].identity;
    q.correct = q.predicted_identity == q.identity;
    q.p_at_1 = m.p_at_1;
    q.rp = m.rp;
    q.m_at_r = m.m_at_r;
    report.per_query.push_back(q);
    report.p_at_1 += m.p_at_1;
    report.rp += m.rp;
    report.m_at_r += m.m_at_r;
  }
  report.evaluated = static_cast<int>(report.per_query.size());
  if (report.evaluated > 0) {
    report.p_at_1 /= report.evaluated;
    report.rp /= report.evaluated;
    report.m_at_r /= report.evaluated;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Files

void write_results_csv(const std::vector<RankingResult>& results, const Gallery& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out << "query_id,query_identity,rank,gallery_index,gallery_identity,stage1,stage2,blended,flagged\n";
  for (const RankingResult& r : results) {
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
      const Candidate& c = r.ranking[i];
      out << r.query_index << ',' << r.query_identity << ',' << i << ',' << c.gallery_index << ','
          << g[static_cast<std::size_t>(c.gallery_index)].identity << ',' << format_double(c.stage1) << ','
          << (c.stage2 ? format_double(*c.stage2) : std::string()) << ',' << format_double(c.blended) << ','
          << (c.flagged ? 1 : 0) << '\n';
    }
  }
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

std::vector<RankingResult> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("query_id,", 0) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, path.string() + ": not a results CSV");
  }
  std::map<int, RankingResult> by_query;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 9) {
      throw FormatError(FormatError::Kind::Truncated, path.string() + ":" + std::to_string(line_no) + ": expected 9 fields");
    }
    try {
      const int qid = std::stoi(f[0]);
      RankingResult& r = by_query[qid];
      r.query_index = qid;
      r.query_identity = std::stoi(f[1]);
      Candidate c;
      c.gallery_index = std::stoi(f[3]);
      c.stage1 = std::stod(f[5]);
      if (!f[6].empty()) c.stage2 = std::stod(f[6]);
      c.blended = std::stod(f[7]);
      c.flagged = f[8] == "1";
      c.shortlisted = c.stage2.has_value() || c.flagged;
      if (r.ranking.empty()) r.predicted_identity = std::stoi(f[4]);
      if (c.flagged) ++r.flagged;
      r.ranking.push_back(c);
    } catch (const std::logic_error&) {
      throw FormatError(FormatError::Kind::HeaderMismatch, path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
  }
  std::vector<RankingResult> out;
  out.reserve(by_query.size());
  for (auto& [id, r] : by_query) out.push_back(std::move(r));
  return out;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  out << "query_id,pred_identity,correct,p_at_1,rp,m_at_r\n";
  char buf[128];
  for (const QueryMetrics& q : report.per_query) {
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.4f,%.4f,%.4f\n", q.query_index, q.predicted_identity, q.correct ? 1 : 0,
                  q.p_at_1, q.rp, q.m_at_r);
    out << buf;
  }
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["p_at_1"] = round4(report.p_at_1);
  j["rp"] = round4(report.rp);
  j["m_at_r"] = round4(report.m_at_r);
  j["evaluated"] = report.evaluated;
  j["excluded"] = report.excluded;
  return j.dump(2);
}

}  // namespace fvit
