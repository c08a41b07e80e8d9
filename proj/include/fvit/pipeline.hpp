#pragma once

// Two-stage identification: image-level cosine ranking over the whole gallery,
// then patch-level re-ranking of the top-k shortlist blended with the
// stage-1 score.

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fvit/embedding_store.hpp"
#include "fvit/emd_reranker.hpp"
#include "fvit/hybrid_vit.hpp"

namespace fvit {

enum class RerankerKind { None, Emd, H2L };

std::string to_string(RerankerKind k);
RerankerKind reranker_from_string(const std::string& s);

struct PipelineConfig {
  int k = 100;                ///< shortlist size, capped at the gallery size
  double alpha = 0.7;         ///< weight on the patch-level score
  bool normalize = true;      ///< min-max normalize both scores over the shortlist before blending
  RerankerKind reranker = RerankerKind::None;
  EmdOptions emd;
  const ModelWeights* weights = nullptr;  ///< required for H2L
  int workers = 1;            ///< threads over queries; results do not depend on it
};

/// ConfigError on k < 1, alpha outside [0, 1], workers < 1 or a missing H2L model.
void validate(const PipelineConfig& cfg);

struct ScoredIndex {
  int index = 0;
  double score = 0.0;
};

/// Cosine of image vectors against every record, descending, ties by index.
/// NumericError on a zero-norm embedding.
std::vector<ScoredIndex> stage1_rank(const FaceRecord& q, const Gallery& g);

struct Candidate {
  int gallery_index = 0;
  double stage1 = 0.0;
  std::optional<double> stage2;  ///< shortlist members that scored successfully
  double blended = 0.0;
  bool shortlisted = false;
  bool flagged = false;          ///< reranker failed; ranked by stage 1 only
};

struct RankingResult {
  int query_index = 0;
  int query_identity = 0;
  std::vector<Candidate> ranking;  ///< whole gallery, final order
  int predicted_identity = -1;
  int flagged = 0;
  int unconverged = 0;             ///< Sinkhorn runs that stopped at max_iters
};

/// Blends stage-2 and stage-1 scores: alpha * s2 + (1 - alpha) * s1, after
/// min-max scaling each over the given entries when `normalize` is set
/// (a constant score vector scales to all zeros).
std::vector<double> blend_scores(std::span<const double> stage1, std::span<const double> stage2, double alpha,
                                 bool normalize);

/// Per-query state shared by stage2_rerank calls (prepared model blocks).
class Reranker {
 public:
  Reranker(const Gallery& g, const PipelineConfig& cfg);
  ~Reranker();
  Reranker(const Reranker&) = delete;
  Reranker& operator=(const Reranker&) = delete;

  /// Prepares cached H2L blocks for the given gallery indices (no-op for
  /// other rerankers). Safe to skip; missing blocks are built on demand.
  void prepare_gallery(std::span<const int> indices);

  /// Patch-level similarities for the candidates; entries that failed are
  /// empty. `unconverged` counts Sinkhorn runs that hit max_iters.
  std::vector<std::optional<double>> score(const FaceRecord& q, std::span<const int> candidates,
                                           int* unconverged) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

RankingResult stage2_rerank(int query_index, const FaceRecord& q, const Gallery& g,
                            const std::vector<ScoredIndex>& stage1, const PipelineConfig& cfg,
                            const Reranker* reranker);

/// Runs both stages for every query; parallel over queries with cfg.workers.
std::vector<RankingResult> run_pipeline(const QuerySet& queries, const Gallery& g, const PipelineConfig& cfg);

struct QueryMetrics {
  int query_index = 0;
  int identity = 0;
  int predicted_identity = -1;
  bool correct = false;
  double p_at_1 = 0.0;
  double rp = 0.0;
  double m_at_r = 0.0;
};

struct RetrievalMetrics {
  double p_at_1 = 0.0;
  double rp = 0.0;
  double m_at_r = 0.0;
};

/// Metrics of one ranked relevance list with R relevant items in total.
/// RP = P@R; M@R = (1/R) sum_{i<=R} rel_i * P@i.
RetrievalMetrics retrieval_metrics(const std::vector<bool>& relevance, int r);

struct EvalReport {
  double p_at_1 = 0.0;
  double rp = 0.0;
  double m_at_r = 0.0;
  int evaluated = 0;
  int excluded = 0;  ///< queries whose identity is absent from the gallery
  std::vector<QueryMetrics> per_query;
};

EvalReport evaluate(const std::vector<RankingResult>& results, const Gallery& g);

// Results CSV: one row per (query, rank). Columns:
// query_id,query_identity,rank,gallery_index,gallery_identity,stage1,stage2,blended,flagged
void write_results_csv(const std::vector<RankingResult>& results, const Gallery& g, const std::filesystem::path& path);
std::vector<RankingResult> read_results_csv(const std::filesystem::path& path);

/// query_id,pred_identity,correct,p_at_1,rp,m_at_r
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
std::string report_json(const EvalReport& report);

}  // namespace fvit
