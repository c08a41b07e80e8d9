#include "fvit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "fvit/error.hpp"
#include "fvit/grad_check.hpp"

namespace fvit {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), salt};
  return std::mt19937_64(seq);
}

constexpr std::uint32_t kPairSalt = 0x9A1E5u;
constexpr std::uint32_t kSplitSalt = 0x5B117u;
constexpr std::uint32_t kAugmentSalt = 0xA06u;
constexpr std::uint32_t kArcSalt = 0xA7Cu;

std::vector<Matrix*> param_list(ModelWeights& w) {
  std::vector<Matrix*> out;
  w.visit([&](Matrix& m) { out.push_back(&m); });
  return out;
}

// Linear outputs of both H2L heads for the batch, used to update the
// feature-norm running statistics.
struct HeadActivations {
  std::vector<Matrix> head1, head2;
};

double cross_entropy_2(const Matrix& logits, int y, Matrix* d_logits, double weight) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log(std::exp(logits(0, 0) - mx) + std::exp(logits(0, 1) - mx));
  if (d_logits != nullptr) {
    d_logits->resize(1, 2);
    for (int j = 0; j < 2; ++j) (*d_logits)(0, j) = weight * (std::exp(logits(0, j) - lse) - (j == y ? 1.0 : 0.0));
  }
  return lse - logits(0, y);
}

double batch_loss_impl(const ModelWeights& w, const ArcFaceParams& arc, const Gallery& g, std::span<const int> labels,
                       std::span<const Pair> pairs, ModelWeights* grad, Matrix* arc_grad, HeadActivations* acts) {
  if (pairs.empty()) throw ConfigError("batch_loss: no pairs");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  auto rec = [&](int i) -> const FaceRecord& { return g[static_cast<std::size_t>(i)]; };
  auto label = [&](int i) { return labels[static_cast<std::size_t>(i)]; };

  switch (w.config.variant) {
    case Variant::H2L: {
      std::vector<H2LTrace> traces;
      traces.reserve(pairs.size());
      Matrix features(2 * n, w.config.out_dim);
      std::vector<int> y(static_cast<std::size_t>(2 * n));
      for (Eigen::Index i = 0; i < n; ++i) {
        const Pair& p = pairs[static_cast<std::size_t>(i)];
        traces.push_back(forward_h2l(rec(p.a), rec(p.b), w));
        features.row(i) = traces.back().f1;
        features.row(n + i) = traces.back().f2;
        y[static_cast<std::size_t>(i)] = label(p.a);
        y[static_cast<std::size_t>(n + i)] = label(p.b);
        if (acts != nullptr) {
          acts->head1.push_back(traces.back().head1.linear);
          acts->head2.push_back(traces.back().head2.linear);
        }
      }
      const ArcFaceResult r = arcface_loss(features, y, arc, grad != nullptr || arc_grad != nullptr);
      if (arc_grad != nullptr) *arc_grad += r.d_class_weights;
      if (grad != nullptr) {
        for (Eigen::Index i = 0; i < n; ++i) {
          const Pair& p = pairs[static_cast<std::size_t>(i)];
          backward_h2l(traces[static_cast<std::size_t>(i)], rec(p.a), rec(p.b), w, r.d_features.row(i),
                       r.d_features.row(n + i), grad);
        }
      }
      return r.loss;
    }
    case Variant::H2: {
      double loss = 0.0;
      const double weight = 1.0 / static_cast<double>(n);
      for (const Pair& p : pairs) {
        const ClsTrace t = forward_h2(rec(p.a), rec(p.b), w);
        Matrix d;
        loss += weight * cross_entropy_2(t.output, p.same ? 1 : 0, grad != nullptr ? &d : nullptr, weight);
        if (grad != nullptr) backward_h2(t, rec(p.a), rec(p.b), w, d, grad);
      }
      return loss;
    }
    case Variant::H1: {
      std::vector<ClsTrace> ta, tb;
      Matrix features(2 * n, w.config.out_dim);
      std::vector<int> y(static_cast<std::size_t>(2 * n));
      for (Eigen::Index i = 0; i < n; ++i) {
        const Pair& p = pairs[static_cast<std::size_t>(i)];
        ta.push_back(forward_h1(rec(p.a), w));
        tb.push_back(forward_h1(rec(p.b), w));
        features.row(i) = ta.back().output;
        features.row(n + i) = tb.back().output;
        y[static_cast<std::size_t>(i)] = label(p.a);
        y[static_cast<std::size_t>(n + i)] = label(p.b);
      }
      const ArcFaceResult r = arcface_loss(features, y, arc, grad != nullptr || arc_grad != nullptr);
      if (arc_grad != nullptr) *arc_grad += r.d_class_weights;
      if (grad != nullptr) {
        for (Eigen::Index i = 0; i < n; ++i) {
          const Pair& p = pairs[static_cast<std::size_t>(i)];
          backward_h1(ta[static_cast<std::size_t>(i)], rec(p.a), w, r.d_features.row(i), grad);
          backward_h1(tb[static_cast<std::size_t>(i)], rec(p.b), w, r.d_features.row(n + i), grad);
        }
      }
      return r.loss;
    }
  }
  throw ConfigError("batch_loss: unknown variant");
}

void update_running_stats(FeatureNorm& bn, const std::vector<Matrix>& rows, double momentum) {
  if (rows.size() < 2) return;
  Matrix stacked(static_cast<Eigen::Index>(rows.size()), rows.front().cols());
  for (std::size_t i = 0; i < rows.size(); ++i) stacked.row(static_cast<Eigen::Index>(i)) = rows[i];
  const RowVector mean = stacked.colwise().mean();
  const Matrix centered = stacked.rowwise() - mean;
  const RowVector var = centered.colwise().squaredNorm() / static_cast<double>(stacked.rows() - 1);
  bn.running_mean = (1.0 - momentum) * bn.running_mean + momentum * mean;
  bn.running_var = (1.0 - momentum) * bn.running_var + momentum * var;
}

struct Split {
  Gallery train, heldout;
};

// Holds out a share of each identity's records, keeping >= 2 on each side.
Split split_records(const Gallery& g, double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < g.size(); ++i) by_id[g[i].identity].push_back(i);
  auto rng = make_rng(seed, kSplitSalt);
  std::set<std::size_t> held;
  for (auto& [id, idx] : by_id) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto want = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size()))));
    if (fraction > 0.0 && idx.size() >= want + 2) held.insert(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(want));
  }
  Split s;
  for (std::size_t i = 0; i < g.size(); ++i) (held.count(i) ? s.heldout : s.train).add(g[i]);
  return s;
}

// Records followed by occluded copies of themselves (index i + size()).
Gallery with_occluded_copies(const Gallery& g, Occlusion kind) {
  Gallery out = g;
  for (const FaceRecord& r : g.records()) out.add(apply_occlusion(r, kind));
  return out;
}

double pair_accuracy(const ModelWeights& w, const Gallery& g, std::span<const Pair> pairs, double threshold) {
  if (pairs.empty()) return 0.0;
  int correct = 0;
  for (const Pair& p : pairs) {
    const bool said_same = pair_score(w, g[static_cast<std::size_t>(p.a)], g[static_cast<std::size_t>(p.b)]) >= threshold;
    correct += said_same == p.same ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

}  // namespace

std::vector<Pair> sample_pairs(const Gallery& g, int n, std::uint64_t seed) {
  if (n < 0 || n % 2 != 0) throw ConfigError("sample_pairs: n must be a nonnegative even number");
  std::vector<Pair> positives_pool;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = i + 1; j < g.size(); ++j) {
      if (g[i].identity == g[j].identity) positives_pool.push_back({static_cast<int>(i), static_cast<int>(j), true});
    }
  }
  if (n == 0) return {};
  if (positives_pool.empty()) throw ConfigError("sample_pairs: no identity has two records, cannot form positives");
  if (g.id_counts().size() < 2) throw ConfigError("sample_pairs: need at least two identities for negatives");

  auto rng = make_rng(seed, kPairSalt);
  std::uniform_int_distribution<std::size_t> pick_pos(0, positives_pool.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_rec(0, g.size() - 1);
  std::bernoulli_distribution flip(0.5);
  std::vector<Pair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n / 2; ++i) {
    Pair p = positives_pool[pick_pos(rng)];
    if (flip(rng)) std::swap(p.a, p.b);
    out.push_back(p);
  }
  for (int i = 0; i < n / 2; ++i) {
    std::size_t a = 0, b = 0;
    do {
      a = pick_rec(rng);
      b = pick_rec(rng);
    } while (g[a].identity == g[b].identity);
    out.push_back({static_cast<int>(a), static_cast<int>(b), false});
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

void validate(const TrainConfig& tc) {
  if (tc.pairs_per_epoch < 2 || tc.pairs_per_epoch % 2 != 0) throw ConfigError("train: pairs_per_epoch must be even and >= 2");
  if (tc.epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (tc.batch_size < 2 || tc.batch_size % 2 != 0) throw ConfigError("train: batch_size must be even and >= 2");
  if (tc.warmup_epochs < 0) throw ConfigError("train: warmup_epochs must be >= 0");
  if (!(tc.lr >= 0.0) || !(tc.lr_warmup >= 0.0)) throw ConfigError("train: learning rates must be >= 0");
  if (!(tc.beta1 >= 0.0 && tc.beta1 < 1.0) || !(tc.beta2 >= 0.0 && tc.beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(tc.adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
  if (!(tc.bn_momentum >= 0.0 && tc.bn_momentum <= 1.0)) throw ConfigError("train: bn_momentum must lie in [0, 1]");
  if (!(tc.heldout_fraction >= 0.0 && tc.heldout_fraction < 1.0)) throw ConfigError("train: heldout_fraction must lie in [0, 1)");
  if (tc.heldout_pairs < 0 || tc.heldout_pairs % 2 != 0) throw ConfigError("train: heldout_pairs must be even");
  if (!(tc.occluded_fraction >= 0.0 && tc.occluded_fraction <= 1.0)) {
    throw ConfigError("train: occluded_fraction must lie in [0, 1]");
  }
  if (!(tc.grad_check_h >= 1e-6 && tc.grad_check_h <= 1e-4)) throw ConfigError("train: grad_check_h must lie in [1e-6, 1e-4]");
}

std::vector<int> class_labels(const Gallery& g) {
  std::map<int, int> index;
  for (const auto& [id, count] : g.id_counts()) index.emplace(id, static_cast<int>(index.size()));
  std::vector<int> out(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = index.at(g[i].identity);
  return out;
}

double batch_loss(const ModelWeights& w, const ArcFaceParams& arc, const Gallery& g, std::span<const int> labels,
                  std::span<const Pair> pairs, ModelWeights* grad, Matrix* arc_grad) {
  return batch_loss_impl(w, arc, g, labels, pairs, grad, arc_grad, nullptr);
}

double pair_score(const ModelWeights& w, const FaceRecord& a, const FaceRecord& b) {
  switch (w.config.variant) {
    case Variant::H2L: return score_pair_h2l(a, b, w).score;
    case Variant::H2: {
      const Matrix logits = score_pair_h2(a, b, w);
      return logits(0, 1) - logits(0, 0);
    }
    case Variant::H1: return cosine(embed_single_h1(a, w), embed_single_h1(b, w));
  }
  throw ConfigError("pair_score: unknown variant");
}

std::pair<double, double> choose_threshold(std::span<const double> scores, std::span<const Pair> pairs) {
  if (scores.size() != pairs.size() || scores.empty()) throw DimensionError("choose_threshold: need one score per pair");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Threshold below everything: all predicted "same".
  int correct = 0;
  for (const Pair& p : pairs) correct += p.same ? 1 : 0;
  int best = correct;
  double best_threshold = scores[order.front()] - 1.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    // Moving the threshold above order[i] flips it to "different".
    correct += pairs[order[i]].same ? -1 : 1;
    const bool boundary = i + 1 == order.size() || scores[order[i + 1]] > scores[order[i]];
    if (boundary && correct > best) {
      best = correct;
      best_threshold = i + 1 == order.size() ? scores[order[i]] + 1.0 : 0.5 * (scores[order[i]] + scores[order[i + 1]]);
    }
  }
  return {best_threshold, static_cast<double>(best) / static_cast<double>(pairs.size())};
}

double check_model_gradient(const ModelWeights& w, const ArcFaceParams& arc, const Gallery& g,
                            std::span<const Pair> pairs, double h, std::uint64_t seed) {
  const std::vector<int> labels = class_labels(g);
  const bool with_arc = w.config.variant != Variant::H2;
  std::vector<double> theta = flatten_params(w);
  const std::size_t n_model = theta.size();
  if (with_arc) theta.insert(theta.end(), arc.class_weights.data(), arc.class_weights.data() + arc.class_weights.size());

  Objective f = [&](std::span<const double> x, std::span<double> grad_out) {
    ModelWeights wx = w;
    unflatten_params(wx, x.data());
    ArcFaceParams ax = arc;
    if (with_arc) std::copy(x.begin() + static_cast<std::ptrdiff_t>(n_model), x.end(), ax.class_weights.data());
    if (grad_out.empty()) return batch_loss(wx, ax, g, labels, pairs, nullptr, nullptr);
    ModelWeights gw = zeros_like(wx);
    Matrix ga = Matrix::Zero(ax.class_weights.rows(), ax.class_weights.cols());
    const double loss = batch_loss(wx, ax, g, labels, pairs, &gw, with_arc ? &ga : nullptr);
    const std::vector<double> flat = flatten_params(gw);
    std::copy(flat.begin(), flat.end(), grad_out.begin());
    if (with_arc) std::copy(ga.data(), ga.data() + ga.size(), grad_out.begin() + static_cast<std::ptrdiff_t>(n_model));
    return loss;
  };
  GradCheckOptions opts;
  opts.mode = GradCheckOptions::Mode::Directions;
  opts.seed = seed;
  return grad_check(f, theta, h, opts);
}

TrainResult train(const ModelWeights& init, const Gallery& data, const TrainConfig& tc) {
  validate(tc);
  if (data.empty()) throw ConfigError("train: empty training data");
  const Split split = split_records(data, tc.heldout_fraction, tc.seed);
  const Gallery train_set = with_occluded_copies(split.train, tc.occlusion);
  const auto n_train = static_cast<int>(split.train.size());
  const std::vector<int> labels = class_labels(train_set);
  const int classes = static_cast<int>(split.train.id_counts().size());

  TrainResult result;
  result.weights = init;
  ModelWeights& w = result.weights;
  const bool with_arc = w.config.variant != Variant::H2;
  if (with_arc) {
    result.arcface.margin = tc.arc_margin;
    result.arcface.scale = tc.arc_scale;
    result.arcface.class_weights = init_class_weights(classes, w.config.out_dim, tc.seed ^ kArcSalt);
  }
  ArcFaceParams& arc = result.arcface;

  // Fixed probe pairs: threshold selection and the per-epoch probe loss.
  const std::vector<Pair> probe = sample_pairs(split.train, std::max(2, tc.heldout_pairs), tc.seed + 1);
  std::vector<Pair> heldout, heldout_occluded;
  Gallery heldout_set;
  if (!split.heldout.empty() && tc.heldout_pairs > 0) {
    heldout_set = with_occluded_copies(split.heldout, tc.occlusion);
    heldout = sample_pairs(split.heldout, tc.heldout_pairs, tc.seed + 2);
    heldout_occluded = heldout;
    for (Pair& p : heldout_occluded) p.a += static_cast<int>(split.heldout.size());
  }

  if (tc.check_gradients) {
    const std::vector<Pair> few(probe.begin(), probe.begin() + std::min<std::ptrdiff_t>(4, static_cast<std::ptrdiff_t>(probe.size())));
    result.history.grad_check_error = check_model_gradient(w, arc, train_set, few, tc.grad_check_h, tc.seed);
    if (!(result.history.grad_check_error < tc.grad_check_tol)) {
      throw ConfigError("train: gradient check failed (max relative error " +
                        std::to_string(result.history.grad_check_error) + "), refusing to train");
    }
  }

  auto probe_loss = [&] {
    double total = 0.0;
    const std::size_t per = static_cast<std::size_t>(tc.batch_size / 2);
    std::size_t batches = 0;
    for (std::size_t s = 0; s < probe.size(); s += per, ++batches) {
      const std::span<const Pair> chunk(probe.data() + s, std::min(per, probe.size() - s));
      total += batch_loss(w, arc, train_set, labels, chunk, nullptr, nullptr);
    }
    return total / static_cast<double>(batches);
  };
  result.history.initial_probe_loss = probe_loss();

  std::vector<Matrix*> params = param_list(w);
  if (with_arc) params.push_back(&arc.class_weights);
  std::vector<Matrix> m1, m2;
  for (Matrix* p : params) {
    m1.push_back(Matrix::Zero(p->rows(), p->cols()));
    m2.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  long step = 0;
  ModelWeights last_good = w;
  ArcFaceParams last_good_arc = arc;
  auto augment_rng = make_rng(tc.seed, kAugmentSalt);
  std::bernoulli_distribution occlude(tc.occluded_fraction);

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const double lr = epoch <= tc.warmup_epochs ? tc.lr_warmup : tc.lr;
    std::vector<Pair> pairs = sample_pairs(split.train, tc.pairs_per_epoch, tc.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
    for (Pair& p : pairs) {
      if (occlude(augment_rng)) p.a += n_train;
    }
    const std::size_t per = static_cast<std::size_t>(tc.batch_size / 2);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    bool diverged = false;
    for (std::size_t s = 0; s < pairs.size(); s += per) {
      const std::span<const Pair> batch(pairs.data() + s, std::min(per, pairs.size() - s));
      ModelWeights grad = zeros_like(w);
      Matrix arc_grad = Matrix::Zero(arc.class_weights.rows(), arc.class_weights.cols());
      HeadActivations acts;
      double loss = 0.0;
      try {
        loss = batch_loss_impl(w, arc, train_set, labels, batch, &grad, with_arc ? &arc_grad : nullptr, &acts);
      } catch (const NumericError&) {
        loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(loss)) {
        diverged = true;
        break;
      }
      epoch_loss += loss;
      ++batches;
      if (lr == 0.0) continue;

      ++step;
      std::vector<Matrix*> grads = param_list(grad);
      if (with_arc) grads.push_back(&arc_grad);
      const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m1[i] = tc.beta1 * m1[i] + (1.0 - tc.beta1) * *grads[i];
        m2[i] = tc.beta2 * m2[i] + (1.0 - tc.beta2) * grads[i]->cwiseAbs2();
        params[i]->array() -= lr * (m1[i].array() / bc1) / ((m2[i].array() / bc2).sqrt() + tc.adam_eps);
      }
      if (w.config.variant == Variant::H2L) {
        update_running_stats(w.bn1, acts.head1, tc.bn_momentum);
        update_running_stats(w.bn2, acts.head2, tc.bn_momentum);
      }
    }

    double current_probe = diverged ? std::numeric_limits<double>::quiet_NaN() : probe_loss();
    if (diverged || !std::isfinite(current_probe)) {
      w = last_good;
      arc = last_good_arc;
      result.history.diverged = true;
      result.history.message = "loss became non-finite in epoch " + std::to_string(epoch) +
                               "; returning the weights from the end of epoch " + std::to_string(epoch - 1);
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = batches > 0 ? epoch_loss / static_cast<double>(batches) : 0.0;
    rec.probe_loss = current_probe;
    std::vector<double> scores;
    scores.reserve(probe.size());
    for (const Pair& p : probe) {
      scores.push_back(pair_score(w, split.train[static_cast<std::size_t>(p.a)], split.train[static_cast<std::size_t>(p.b)]));
    }
    std::tie(rec.threshold, rec.train_accuracy) = choose_threshold(scores, probe);
    rec.heldout_accuracy = pair_accuracy(w, heldout_set, heldout, rec.threshold);
    rec.heldout_occluded_accuracy = pair_accuracy(w, heldout_set, heldout_occluded, rec.threshold);
    result.history.epochs.push_back(rec);
    last_good = w;
    last_good_arc = arc;
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const TrainConfig& tc) {
  return {{"pairs_per_epoch", tc.pairs_per_epoch},
          {"epochs", tc.epochs},
          {"batch_size", tc.batch_size},
          {"warmup_epochs", tc.warmup_epochs},
          {"lr_warmup", tc.lr_warmup},
          {"lr", tc.lr},
          {"beta1", tc.beta1},
          {"beta2", tc.beta2},
          {"adam_eps", tc.adam_eps},
          {"bn_momentum", tc.bn_momentum},
          {"arc_margin", tc.arc_margin},
          {"arc_scale", tc.arc_scale},
          {"heldout_fraction", tc.heldout_fraction},
          {"heldout_pairs", tc.heldout_pairs},
          {"occluded_fraction", tc.occluded_fraction},
          {"occlusion", to_string(tc.occlusion)},
          {"seed", tc.seed},
          {"check_gradients", tc.check_gradients},
          {"grad_check_h", tc.grad_check_h},
          {"grad_check_tol", tc.grad_check_tol}};
}

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      throw ConfigError(std::string(what) + ": unknown field '" + key + "'");
    }
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"pairs_per_epoch", "epochs", "batch_size", "warmup_epochs", "lr_warmup", "lr", "beta1", "beta2",
                  "adam_eps", "bn_momentum", "arc_margin", "arc_scale", "heldout_fraction", "heldout_pairs",
                  "occluded_fraction", "occlusion", "seed", "check_gradients", "grad_check_h", "grad_check_tol"},
                 "train config");
  TrainConfig tc;
  read_field(j, "pairs_per_epoch", tc.pairs_per_epoch);
  read_field(j, "epochs", tc.epochs);
  read_field(j, "batch_size", tc.batch_size);
  read_field(j, "warmup_epochs", tc.warmup_epochs);
  read_field(j, "lr_warmup", tc.lr_warmup);
  read_field(j, "lr", tc.lr);
  read_field(j, "beta1", tc.beta1);
  read_field(j, "beta2", tc.beta2);
  read_field(j, "adam_eps", tc.adam_eps);
  read_field(j, "bn_momentum", tc.bn_momentum);
  read_field(j, "arc_margin", tc.arc_margin);
  read_field(j, "arc_scale", tc.arc_scale);
  read_field(j, "heldout_fraction", tc.heldout_fraction);
  read_field(j, "heldout_pairs", tc.heldout_pairs);
  read_field(j, "occluded_fraction", tc.occluded_fraction);
  std::string occ = to_string(tc.occlusion);
  read_field(j, "occlusion", occ);
  tc.occlusion = occlusion_from_string(occ);
  read_field(j, "seed", tc.seed);
  read_field(j, "check_gradients", tc.check_gradients);
  read_field(j, "grad_check_h", tc.grad_check_h);
  read_field(j, "grad_check_tol", tc.grad_check_tol);
  validate(tc);
  return tc;
}

nlohmann::json to_json(const ModelConfig& mc) {
  return {{"variant", to_string(mc.variant)}, {"depth", mc.depth},       {"heads", mc.heads},
          {"dim", mc.dim},                    {"grid", mc.grid},         {"head_dim", mc.head_dim},
          {"mlp_width", mc.mlp_width},        {"out_dim", mc.out_dim},   {"use_pos", mc.use_pos}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"variant", "depth", "heads", "dim", "grid", "head_dim", "mlp_width", "out_dim", "use_pos"},
                 "model config");
  ModelConfig mc;
  std::string variant = to_string(mc.variant);
  read_field(j, "variant", variant);
  mc.variant = variant_from_string(variant);
  read_field(j, "depth", mc.depth);
  read_field(j, "heads", mc.heads);
  read_field(j, "dim", mc.dim);
  read_field(j, "grid", mc.grid);
  read_field(j, "head_dim", mc.head_dim);
  read_field(j, "mlp_width", mc.mlp_width);
  read_field(j, "out_dim", mc.out_dim);
  read_field(j, "use_pos", mc.use_pos);
  return resolve(mc);
}

nlohmann::json to_json(const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochRecord& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"train_loss", e.train_loss},
                      {"probe_loss", e.probe_loss},
                      {"threshold", e.threshold},
                      {"train_accuracy", e.train_accuracy},
                      {"heldout_accuracy", e.heldout_accuracy},
                      {"heldout_occluded_accuracy", e.heldout_occluded_accuracy}});
  }
  return {{"initial_probe_loss", h.initial_probe_loss},
          {"grad_check_error", h.grad_check_error},
          {"diverged", h.diverged},
          {"message", h.message},
          {"epochs", epochs}};
}

}  // namespace fvit
