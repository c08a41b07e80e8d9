#pragma once

// Hybrid ViT over pre-computed patch embeddings.
//
//   H2L: [CLS, patches(a), SEP, patches(b)] -> encoder -> two untied
//        flatten/Linear/feature-norm/LayerNorm heads over the two image
//        blocks; the pair score is cos(f1, f2).
//   H2:  same token layout, 2-way same/different logits from the CLS row.
//   H1:  [CLS, patches(a)] -> encoder -> CLS feature (single-image baseline).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fvit/embedding_store.hpp"
#include "fvit/nn_core.hpp"

namespace fvit {

enum class Variant : std::uint8_t { H1 = 1, H2 = 2, H2L = 3 };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::H2L;
  int depth = 1;
  int heads = 1;
  int dim = kDefaultDim;
  int grid = kDefaultGrid;
  int head_dim = 0;   ///< 0 = dim / heads
  int mlp_width = 0;  ///< 0 = 4 * dim
  int out_dim = 512;
  bool use_pos = true;
  double ln_eps = 1e-5;
  double bn_eps = 1e-5;

  int patches() const { return grid * grid; }
  int tokens() const { return variant == Variant::H1 ? patches() + 1 : 2 * patches() + 2; }
  /// Row index of the SEP token (first row of the second image block is sep_row() + 1).
  int sep_row() const { return patches() + 1; }

  bool operator==(const ModelConfig&) const = default;
};

/// Fills head_dim / mlp_width defaults and checks ranges (ConfigError).
ModelConfig resolve(ModelConfig cfg);

/// Per-feature affine normalization between a head's Linear and LayerNorm:
/// y = (x - running_mean) / sqrt(running_var + eps) * gamma + beta.
/// Running statistics are buffers, not trainable parameters.
struct FeatureNorm {
  Matrix gamma, beta;
  Matrix running_mean, running_var;

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
  template <class F>
  void visit(F&& f) const {
    f(gamma);
    f(beta);
  }
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_proj;  // D x D
  Matrix cls_token;   // 1 x D
  Matrix sep_token;   // 1 x D (unused by H1)
  Matrix pos_embed;   // tokens x D
  std::vector<LayerParams> layers;
  LayerNormParams head_norm;  // out_dim (H2L) or D (H1, H2)
  // H2L heads
  Matrix fc1_w, fc1_b, fc2_w, fc2_b;  // (P^2 D) x out_dim, 1 x out_dim
  FeatureNorm bn1, bn2;
  // H2: D x 2 logits; H1: D x out_dim embedding
  Matrix out_w, out_b;

  /// Trainable parameters in the declared (file) order.
  template <class F>
  void visit(F&& f) {
    visit_fields(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_fields(*this, f);
  }

  /// Non-trainable buffers (feature-norm running statistics).
  template <class F>
  void visit_buffers(F&& f) {
    visit_buffer_fields(*this, f);
  }
  template <class F>
  void visit_buffers(F&& f) const {
    visit_buffer_fields(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_fields(Self& s, F& f) {
    const Variant v = s.config.variant;
    f(s.token_proj);
    f(s.cls_token);
    if (v != Variant::H1) f(s.sep_token);
    f(s.pos_embed);
    for (auto& layer : s.layers) layer.visit(f);
    s.head_norm.visit(f);
    if (v == Variant::H2L) {
      f(s.fc1_w);
      f(s.fc1_b);
      s.bn1.visit(f);
      f(s.fc2_w);
      f(s.fc2_b);
      s.bn2.visit(f);
    } else {
      f(s.out_w);
      f(s.out_b);
    }
  }
  template <class Self, class F>
  static void visit_buffer_fields(Self& s, F& f) {
    if (s.config.variant == Variant::H2L) {
      f(s.bn1.running_mean);
      f(s.bn1.running_var);
      f(s.bn2.running_mean);
      f(s.bn2.running_var);
    }
  }
};

/// Correctly shaped weights: zero affine maps and tokens, unit norms.
ModelWeights allocate_weights(const ModelConfig& cfg);

/// Deterministic initialization: truncated-normal (std 0.02) tokens and
/// positional table, token projection = identity plus small noise, affine
/// maps uniform in +-1/sqrt(fan_in), norms at identity. Values are rounded
/// to f32 so the weight file round-trips exactly.
ModelWeights init_random(const ModelConfig& cfg, std::uint64_t seed);

// "FVWT" weight file: magic, u16 version, config block, u64 scalar count,
// then f32 parameter blocks in visit() order followed by buffers.
void save_weights(const ModelWeights& w, const std::filesystem::path& path);
/// Loads a weight file; the stored config is returned in `w.config`.
ModelWeights load_weights(const std::filesystem::path& path);
/// As above but throws FormatError(HeaderMismatch) unless the stored config
/// equals `expected` (after resolve()).
ModelWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected);

std::vector<std::uint8_t> encode_weights(const ModelWeights& w);
ModelWeights decode_weights(const std::vector<std::uint8_t>& bytes);

// ---------------------------------------------------------------------------
// Forward passes

/// z0 = [CLS E, a E, SEP E, b E] + E_pos (E_pos omitted when use_pos is off).
Matrix assemble_tokens(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w);
/// z0 = [CLS E, a E] + E_pos for the single-image model.
Matrix assemble_tokens_single(const FaceRecord& a, const ModelWeights& w);

struct EncoderTrace {
  std::vector<EncoderLayerCache> layers;
};

/// Runs all encoder layers. Attention maps (layer-major, head-minor) are
/// appended to `attn_maps` when given.
Matrix run_encoder(const Matrix& z0, const ModelWeights& w, EncoderTrace* trace = nullptr,
                   std::vector<Matrix>* attn_maps = nullptr);

struct PairScore {
  double score = 0.0;
  Matrix f1, f2;  // 1 x out_dim
};

struct H2LOptions {
  /// Replace the flatten/Linear heads by mean pooling over each block.
  /// Only meaningful for the permutation-invariance check.
  bool mean_pool_heads = false;
};

/// Cross-attention pair similarity cos(f1, f2). ConfigError if the weights
/// are not H2L; NumericError on non-finite activations.
PairScore score_pair_h2l(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w,
                         const H2LOptions& options = {});

/// Same/different logits (1 x 2; column 1 = same identity).
Matrix score_pair_h2(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w);

/// CLS embedding of a single image (1 x out_dim).
Matrix embed_single_h1(const FaceRecord& a, const ModelWeights& w);

double cosine(const Matrix& a, const Matrix& b);

/// Inference path for H2L re-ranking. Each image block's first-layer state
/// (projected tokens and Q/K/V) depends only on that image and its slot, so
/// it is prepared once per record and reused across pairs.
class H2LScorer {
 public:
  struct Block {
    Matrix z0;
    QKV qkv;
  };

  explicit H2LScorer(const ModelWeights& w);

  /// slot 0 = first image (query), slot 1 = second image (candidate).
  Block prepare(const FaceRecord& r, int slot) const;
  PairScore score(const Block& first, const Block& second) const;
  /// Scores one first-slot block against many candidates. The head
  /// projections run as batched products, which is what makes the flattened
  /// (P^2 D)-wide Linear layers affordable.
  std::vector<double> score_batch(const Block& first, std::span<const Block* const> seconds) const;

  const ModelWeights& weights() const { return w_; }

 private:
  Block prepare_rows(const Matrix& z0) const;
  /// Encoder output for each (first, seconds[i]) pair, stacked pair-major
  /// (tokens() rows per pair). Row-wise work runs as one product per layer.
  Matrix encode_many(const Block& first, std::span<const Block* const> seconds) const;

  const ModelWeights& w_;
  Block cls_;
  Block sep_;
};

// ---------------------------------------------------------------------------
// Training support: traced forward passes and their reverse passes.
// Gradients accumulate into `grad` (same shape as the weights).

struct HeadTrace {
  Matrix flat;     // 1 x (P^2 D)
  Matrix linear;   // 1 x out_dim, pre-normalization
  Matrix normed;   // standardized linear output (before gamma/beta)
  LayerNormCache ln;
};

struct H2LTrace {
  Matrix z0;
  EncoderTrace encoder;
  Matrix z_out;
  HeadTrace head1, head2;
  Matrix f1, f2;
};

H2LTrace forward_h2l(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w);
void backward_h2l(const H2LTrace& t, const FaceRecord& a, const FaceRecord& b, const ModelWeights& w,
                  const Matrix& d_f1, const Matrix& d_f2, ModelWeights* grad);

struct ClsTrace {
  Matrix z0;
  EncoderTrace encoder;
  Matrix z_out;
  LayerNormCache ln;
  Matrix cls_normed;
  Matrix output;  // logits (H2) or embedding (H1)
};

ClsTrace forward_h2(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w);
void backward_h2(const ClsTrace& t, const FaceRecord& a, const FaceRecord& b, const ModelWeights& w,
                 const Matrix& d_logits, ModelWeights* grad);

ClsTrace forward_h1(const FaceRecord& a, const ModelWeights& w);
void backward_h1(const ClsTrace& t, const FaceRecord& a, const ModelWeights& w, const Matrix& d_embedding,
                 ModelWeights* grad);

}  // namespace fvit
