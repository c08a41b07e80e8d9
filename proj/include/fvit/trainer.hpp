#pragma once

// Toy-scale training of the hybrid ViT variants on synthetic identities.
//
//   H2L: ArcFace over [f1 block; f2 block] with each image's identity label.
//   H2:  2-way cross-entropy on the same/different logits.
//   H1:  ArcFace over independently embedded images.
//
// Pair verification accuracy uses a threshold picked on training pairs.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fvit/arcface.hpp"
#include "fvit/embedding_store.hpp"
#include "fvit/hybrid_vit.hpp"

namespace fvit {

struct Pair {
  int a = 0;
  int b = 0;
  bool same = false;

  bool operator==(const Pair&) const = default;
};

/// n/2 positive pairs (same identity, distinct records) and n/2 negative
/// pairs, each drawn uniformly over eligible record combinations, then
/// shuffled. ConfigError for odd n or when positives/negatives are impossible.
std::vector<Pair> sample_pairs(const Gallery& g, int n, std::uint64_t seed);

struct TrainConfig {
  int pairs_per_epoch = 200;
  int epochs = 30;
  int batch_size = 16;          ///< images per batch (two per pair), even
  int warmup_epochs = 1;
  double lr_warmup = 1e-4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double bn_momentum = 0.1;
  double arc_margin = 0.5;
  double arc_scale = 30.0;
  double heldout_fraction = 0.3;  ///< share of each identity's records held out
  int heldout_pairs = 200;
  double occluded_fraction = 0.0; ///< training pairs whose first image is masked
  Occlusion occlusion = Occlusion::Mask;
  std::uint64_t seed = 0;
  bool check_gradients = true;
  double grad_check_h = 1e-5;
  double grad_check_tol = 1e-4;
};

void validate(const TrainConfig& tc);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;   ///< mean batch loss seen during the epoch
  double probe_loss = 0.0;   ///< loss on the fixed probe pairs after the epoch
  double threshold = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  double heldout_occluded_accuracy = 0.0;
};

struct TrainHistory {
  double initial_probe_loss = 0.0;
  double grad_check_error = 0.0;
  std::vector<EpochRecord> epochs;
  bool diverged = false;
  std::string message;
};

struct TrainResult {
  ModelWeights weights;
  ArcFaceParams arcface;  ///< unused (empty) for H2
  TrainHistory history;
};

/// Class index of each record's identity (dense, ordered by identity).
std::vector<int> class_labels(const Gallery& g);

/// Mean loss over the pairs; gradients accumulate into `grad` / `arc_grad`
/// when given. `arc` is ignored for H2.
double batch_loss(const ModelWeights& w, const ArcFaceParams& arc, const Gallery& g, std::span<const int> labels,
                  std::span<const Pair> pairs, ModelWeights* grad, Matrix* arc_grad);

/// Verification score of a pair (higher = more likely the same identity).
double pair_score(const ModelWeights& w, const FaceRecord& a, const FaceRecord& b);

/// Best-accuracy threshold over the scores; returns {threshold, accuracy}.
std::pair<double, double> choose_threshold(std::span<const double> scores, std::span<const Pair> pairs);

/// Max relative error of the model + loss gradient on the pairs.
double check_model_gradient(const ModelWeights& w, const ArcFaceParams& arc, const Gallery& g,
                            std::span<const Pair> pairs, double h, std::uint64_t seed);

/// Trains from `init`. Throws ConfigError if the gradient precondition fails.
/// A NaN loss stops training and returns the last finite weights with
/// history.diverged set.
TrainResult train(const ModelWeights& init, const Gallery& data, const TrainConfig& tc);

nlohmann::json to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& mc);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainHistory& h);

}  // namespace fvit
