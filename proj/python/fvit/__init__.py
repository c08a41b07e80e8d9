"""Two-stage occlusion-robust face retrieval over patch embeddings.

Stage 1 ranks a gallery by cosine similarity of pooled embeddings; stage 2
re-ranks the top k with either an entropic transport distance over patch
sets or a cross-attention ViT pair scorer.
"""

from ._fvit import (
    ConfigError,
    DimensionError,
    Error,
    FaceRecord,
    FormatError,
    Gallery,
    ModelWeights,
    NumericError,
    RankingResult,
    arcface_loss,
    cc_heatmap,
    emd_similarity,
    evaluate,
    exact_assignment_oracle,
    fit_loglog_slope,
    generate_synthetic,
    init_model,
    normalize_map,
    pair_score,
    retrieval_metrics,
    run_pipeline,
    score_pair_h2l,
    sinkhorn,
    stage1_rank,
    time_reranker,
    train,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "Error",
    "FaceRecord",
    "FormatError",
    "Gallery",
    "ModelWeights",
    "NumericError",
    "RankingResult",
    "arcface_loss",
    "cc_heatmap",
    "emd_similarity",
    "evaluate",
    "exact_assignment_oracle",
    "fit_loglog_slope",
    "generate_synthetic",
    "init_model",
    "normalize_map",
    "pair_score",
    "retrieval_metrics",
    "run_pipeline",
    "score_pair_h2l",
    "sinkhorn",
    "stage1_rank",
    "time_reranker",
    "train",
]
