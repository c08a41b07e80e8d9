#include "fvit/hybrid_vit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "binary_io.hpp"
#include "fvit/error.hpp"

namespace fvit {

namespace {

constexpr std::array<char, 4> kWeightMagic{'F', 'V', 'W', 'T'};
constexpr std::uint16_t kWeightVersion = 1;
// Pairs per batched head product (the (P^2 D) x out_dim weights are large,
// so they should be streamed as few times as possible) and per batched
// encoder pass.
constexpr std::size_t kHeadChunk = 128;
constexpr std::size_t kEncodeChunk = 8;

void require_variant(const ModelWeights& w, Variant v, const char* what) {
  if (w.config.variant != v) {
    throw ConfigError(std::string(what) + ": weights are " + to_string(w.config.variant) + ", expected " +
                      to_string(v));
  }
}

void require_record(const FaceRecord& r, const ModelConfig& cfg, const char* what) {
  if (r.patches.rows() != cfg.patches() || r.patches.cols() != cfg.dim) {
    throw DimensionError(std::string(what) + ": record has " + std::to_string(r.patches.rows()) + "x" +
                         std::to_string(r.patches.cols()) + " patches, model expects " +
                         std::to_string(cfg.patches()) + "x" + std::to_string(cfg.dim));
  }
}

class Init {
 public:
  explicit Init(std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x57u};
    rng_.seed(seq);
  }

  // Normal(0, std) truncated at two standard deviations.
  Matrix trunc_normal(Eigen::Index rows, Eigen::Index cols, double std) {
    std::normal_distribution<double> n;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double x = n(rng_);
      while (std::abs(x) > 2.0) x = n(rng_);
      m.data()[i] = static_cast<float>(x * std);
    }
    return m;
  }

  Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(u(rng_));
    return m;
  }

  // Linear layer with PyTorch-style fan-in scaling for weight and bias.
  void linear(Matrix& w, Matrix& b, Eigen::Index in, Eigen::Index out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = uniform(in, out, bound);
    b = uniform(1, out, bound);
  }

 private:
  std::mt19937_64 rng_;
};

LayerNormParams unit_norm(Eigen::Index d) { return {Matrix::Ones(1, d), Matrix::Zero(1, d)}; }

FeatureNorm unit_feature_norm(Eigen::Index d) {
  return {Matrix::Ones(1, d), Matrix::Zero(1, d), Matrix::Zero(1, d), Matrix::Ones(1, d)};
}

// Rows of z0 for `x` placed at positional rows [pos_row, pos_row + x.rows()).
Matrix project_rows(const Matrix& x, const ModelWeights& w, Eigen::Index pos_row) {
  Matrix out(x.rows(), w.token_proj.cols());
  out.noalias() = x * w.token_proj;
  if (w.config.use_pos) out += w.pos_embed.middleRows(pos_row, x.rows());
  return out;
}

// Linear -> feature norm -> shared LayerNorm over a batch of flattened blocks.
Matrix head_forward(const Matrix& flat, const Matrix& fc_w, const Matrix& fc_b, const FeatureNorm& bn,
                    const ModelWeights& w, HeadTrace* trace) {
  Matrix linear = affine(flat, fc_w, fc_b);
  const RowVector inv = (bn.running_var.array() + w.config.bn_eps).rsqrt().matrix();
  Matrix normed = (linear.rowwise() - RowVector(bn.running_mean)).array().rowwise() * inv.array();
  Matrix scaled = (normed.array().rowwise() * bn.gamma.row(0).array()).matrix();
  scaled.rowwise() += bn.beta.row(0);
  Matrix f = layer_norm(scaled, w.head_norm, w.config.ln_eps, trace != nullptr ? &trace->ln : nullptr);
  if (trace != nullptr) {
    trace->flat = flat;
    trace->linear = std::move(linear);
    trace->normed = std::move(normed);
  }
  return f;
}

// Returns d(flat).
Matrix head_backward(const HeadTrace& t, const Matrix& df, const Matrix& fc_w, const FeatureNorm& bn,
                     const ModelWeights& w, ModelWeights* grad, Matrix* g_fc_w, Matrix* g_fc_b,
                     FeatureNorm* g_bn) {
  const Matrix d_scaled = layer_norm_backward(df, w.head_norm, t.ln, grad != nullptr ? &grad->head_norm : nullptr);
  if (grad != nullptr) {
    g_bn->gamma += d_scaled.cwiseProduct(t.normed).colwise().sum();
    g_bn->beta += d_scaled.colwise().sum();
  }
  const RowVector inv = (bn.running_var.array() + w.config.bn_eps).rsqrt().matrix();
  const Matrix d_linear = d_scaled.array().rowwise() * (bn.gamma.row(0).array() * inv.array());
  if (grad != nullptr) {
    g_fc_w->noalias() += t.flat.transpose() * d_linear;
    *g_fc_b += d_linear.colwise().sum();
  }
  return d_linear * fc_w.transpose();
}

// Flattens rows [first, first + n) of z into a single row.
Matrix flatten_block(const Matrix& z, Eigen::Index first, Eigen::Index n) {
  const Matrix block = z.middleRows(first, n);
  return Eigen::Map<const Matrix>(block.data(), 1, block.size());
}

void unflatten_into(const Matrix& d_flat, Matrix& dz, Eigen::Index first, Eigen::Index n) {
  dz.middleRows(first, n) += Eigen::Map<const Matrix>(d_flat.data(), n, dz.cols());
}

Matrix encoder_backward(const Matrix& d_out, const ModelWeights& w, const EncoderTrace& trace, ModelWeights* grad) {
  Matrix dz = d_out;
  for (std::size_t l = w.layers.size(); l-- > 0;) {
    dz = encoder_layer_backward(dz, w.layers[l], w.config.ln_eps, trace.layers[l],
                                grad != nullptr ? &grad->layers[l] : nullptr);
  }
  return dz;
}

// Accumulates gradients of z0 = [CLS; a; (SEP; b)] E + E_pos.
void assemble_backward(const Matrix& d_z0, const FaceRecord& a, const FaceRecord* b, const ModelWeights& w,
                       ModelWeights* grad) {
  const Eigen::Index p = w.config.patches();
  if (w.config.use_pos) grad->pos_embed += d_z0;
  Matrix input(d_z0.rows(), w.config.dim);
  input.row(0) = w.cls_token;
  input.middleRows(1, p) = a.patches;
  if (b != nullptr) {
    input.row(p + 1) = w.sep_token;
    input.middleRows(p + 2, p) = b->patches;
  }
  grad->token_proj.noalias() += input.transpose() * d_z0;
  grad->cls_token += d_z0.row(0) * w.token_proj.transpose();
  if (b != nullptr) grad->sep_token += d_z0.row(p + 1) * w.token_proj.transpose();
}

void cls_head(const Matrix& z_out, const ModelWeights& w, ClsTrace& t) {
  t.cls_normed = layer_norm(z_out.topRows(1), w.head_norm, w.config.ln_eps, &t.ln);
  t.output = affine(t.cls_normed, w.out_w, w.out_b);
  require_finite(t.output, "hybrid_vit output");
}

Matrix cls_head_backward(const ClsTrace& t, const Matrix& d_output, const ModelWeights& w, ModelWeights* grad) {
  grad->out_w.noalias() += t.cls_normed.transpose() * d_output;
  grad->out_b += d_output;
  const Matrix d_cls = layer_norm_backward(d_output * w.out_w.transpose(), w.head_norm, t.ln, &grad->head_norm);
  Matrix dz = Matrix::Zero(t.z_out.rows(), t.z_out.cols());
  dz.row(0) = d_cls;
  return dz;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::H1: return "h1";
    case Variant::H2: return "h2";
    case Variant::H2L: return "h2l";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "h1") return Variant::H1;
  if (lower == "h2") return Variant::H2;
  if (lower == "h2l") return Variant::H2L;
  throw ConfigError("unknown model variant '" + s + "'");
}

ModelConfig resolve(ModelConfig cfg) {
  if (cfg.variant != Variant::H1 && cfg.variant != Variant::H2 && cfg.variant != Variant::H2L) {
    throw ConfigError("model config: unknown variant");
  }
  if (cfg.depth < 1) throw ConfigError("model config: depth must be >= 1");
  constexpr std::array<int, 5> allowed_heads{1, 2, 4, 6, 8};
  if (std::find(allowed_heads.begin(), allowed_heads.end(), cfg.heads) == allowed_heads.end()) {
    throw ConfigError("model config: heads must be one of 1, 2, 4, 6, 8");
  }
  if (cfg.dim < 1 || cfg.grid < 1 || cfg.out_dim < 1) {
    throw ConfigError("model config: dim, grid and out_dim must be positive");
  }
  if (cfg.head_dim == 0) cfg.head_dim = std::max(1, cfg.dim / cfg.heads);
  if (cfg.mlp_width == 0) cfg.mlp_width = 4 * cfg.dim;
  if (cfg.head_dim < 1 || cfg.mlp_width < 1) throw ConfigError("model config: head_dim and mlp_width must be positive");
  if (!(cfg.ln_eps > 0.0) || !(cfg.bn_eps > 0.0)) throw ConfigError("model config: eps must be positive");
  if (cfg.variant == Variant::H2) cfg.out_dim = 2;
  return cfg;
}

ModelWeights allocate_weights(const ModelConfig& config) {
  const ModelConfig cfg = resolve(config);
  const Eigen::Index d = cfg.dim;
  const Eigen::Index inner = static_cast<Eigen::Index>(cfg.heads) * cfg.head_dim;
  ModelWeights w;
  w.config = cfg;
  w.token_proj = Matrix::Zero(d, d);
  w.cls_token = Matrix::Zero(1, d);
  w.sep_token = Matrix::Zero(1, d);
  w.pos_embed = Matrix::Zero(cfg.tokens(), d);
  w.layers.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& layer : w.layers) {
    layer.ln1 = unit_norm(d);
    layer.ln2 = unit_norm(d);
    AttentionParams& a = layer.attn;
    a.heads = cfg.heads;
    a.head_dim = cfg.head_dim;
    for (Matrix* m : {&a.wq, &a.wk, &a.wv}) m->setZero(d, inner);
    for (Matrix* m : {&a.bq, &a.bk, &a.bv}) m->setZero(1, inner);
    a.wo.setZero(inner, d);
    a.bo.setZero(1, d);
    layer.mlp.w1.setZero(d, cfg.mlp_width);
    layer.mlp.b1.setZero(1, cfg.mlp_width);
    layer.mlp.w2.setZero(cfg.mlp_width, d);
    layer.mlp.b2.setZero(1, d);
  }
  if (cfg.variant == Variant::H2L) {
    const Eigen::Index flat = static_cast<Eigen::Index>(cfg.patches()) * d;
    w.head_norm = unit_norm(cfg.out_dim);
    w.fc1_w.setZero(flat, cfg.out_dim);
    w.fc2_w.setZero(flat, cfg.out_dim);
    w.fc1_b.setZero(1, cfg.out_dim);
    w.fc2_b.setZero(1, cfg.out_dim);
    w.bn1 = unit_feature_norm(cfg.out_dim);
    w.bn2 = unit_feature_norm(cfg.out_dim);
  } else {
    w.head_norm = unit_norm(d);
    w.out_w.setZero(d, cfg.out_dim);
    w.out_b.setZero(1, cfg.out_dim);
  }
  return w;
}

ModelWeights init_random(const ModelConfig& config, std::uint64_t seed) {
  const ModelConfig cfg = resolve(config);
  const Eigen::Index d = cfg.dim;
  const Eigen::Index inner = static_cast<Eigen::Index>(cfg.heads) * cfg.head_dim;
  Init init(seed);

  ModelWeights w;
  w.config = cfg;
  w.token_proj = Matrix::Identity(d, d) + init.trunc_normal(d, d, 0.02 / std::sqrt(static_cast<double>(d)));
  w.token_proj = w.token_proj.cast<float>().cast<double>();
  w.cls_token = init.trunc_normal(1, d, 0.02);
  w.sep_token = cfg.variant == Variant::H1 ? Matrix::Zero(1, d) : init.trunc_normal(1, d, 0.02);
  w.pos_embed = init.trunc_normal(cfg.tokens(), d, 0.02);

  w.layers.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& layer : w.layers) {
    layer.ln1 = unit_norm(d);
    layer.ln2 = unit_norm(d);
    layer.attn.heads = cfg.heads;
    layer.attn.head_dim = cfg.head_dim;
    init.linear(layer.attn.wq, layer.attn.bq, d, inner);
    init.linear(layer.attn.wk, layer.attn.bk, d, inner);
    init.linear(layer.attn.wv, layer.attn.bv, d, inner);
    init.linear(layer.attn.wo, layer.attn.bo, inner, d);
    init.linear(layer.mlp.w1, layer.mlp.b1, d, cfg.mlp_width);
    init.linear(layer.mlp.w2, layer.mlp.b2, cfg.mlp_width, d);
  }

  if (cfg.variant == Variant::H2L) {
    const Eigen::Index flat = static_cast<Eigen::Index>(cfg.patches()) * d;
    w.head_norm = unit_norm(cfg.out_dim);
    init.linear(w.fc1_w, w.fc1_b, flat, cfg.out_dim);
    init.linear(w.fc2_w, w.fc2_b, flat, cfg.out_dim);
    w.bn1 = unit_feature_norm(cfg.out_dim);
    w.bn2 = unit_feature_norm(cfg.out_dim);
  } else {
    w.head_norm = unit_norm(d);
    init.linear(w.out_w, w.out_b, d, cfg.out_dim);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Weight file

std::vector<std::uint8_t> encode_weights(const ModelWeights& w) {
  const ModelConfig& c = w.config;
  detail::ByteWriter out;
  out.bytes(kWeightMagic.data(), kWeightMagic.size());
  out.uint<std::uint16_t>(kWeightVersion);
  out.uint<std::uint8_t>(static_cast<std::uint8_t>(c.variant));
  out.uint<std::uint8_t>(c.use_pos ? 1 : 0);
  out.uint<std::uint16_t>(static_cast<std::uint16_t>(c.depth));
  out.uint<std::uint16_t>(static_cast<std::uint16_t>(c.heads));
  out.uint<std::uint16_t>(static_cast<std::uint16_t>(c.grid));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(c.dim));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(c.head_dim));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(c.mlp_width));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(c.out_dim));
  out.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(c.ln_eps));
  out.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(c.bn_eps));

  std::uint64_t count = 0;
  w.visit([&](const Matrix& m) { count += static_cast<std::uint64_t>(m.size()); });
  w.visit_buffers([&](const Matrix& m) { count += static_cast<std::uint64_t>(m.size()); });
  out.uint<std::uint64_t>(count);
  auto write = [&](const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) out.f32(m.data()[i]);
  };
  w.visit(write);
  w.visit_buffers(write);
  return std::move(out.buffer());
}

ModelWeights decode_weights(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  if (in.remaining() < kWeightMagic.size()) {
    throw FormatError(FormatError::Kind::Truncated, "weight file shorter than its magic");
  }
  if (in.bytes(4) != std::string(kWeightMagic.data(), kWeightMagic.size())) {
    throw FormatError(FormatError::Kind::BadMagic, "not a weight file (bad magic)");
  }
  const auto version = in.uint<std::uint16_t>();
  if (version != kWeightVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch, "unsupported weight file version " + std::to_string(version));
  }
  ModelConfig c;
  const auto variant = in.uint<std::uint8_t>();
  if (variant < 1 || variant > 3) {
    throw FormatError(FormatError::Kind::HeaderMismatch, "weight file: unknown variant code " + std::to_string(variant));
  }
  c.variant = static_cast<Variant>(variant);
  c.use_pos = in.uint<std::uint8_t>() != 0;
  c.depth = in.uint<std::uint16_t>();
  c.heads = in.uint<std::uint16_t>();
  c.grid = in.uint<std::uint16_t>();
  c.dim = static_cast<int>(in.uint<std::uint32_t>());
  c.head_dim = static_cast<int>(in.uint<std::uint32_t>());
  c.mlp_width = static_cast<int>(in.uint<std::uint32_t>());
  c.out_dim = static_cast<int>(in.uint<std::uint32_t>());
  c.ln_eps = std::bit_cast<double>(in.uint<std::uint64_t>());
  c.bn_eps = std::bit_cast<double>(in.uint<std::uint64_t>());
  try {
    c = resolve(c);
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::HeaderMismatch, std::string("weight file: invalid config: ") + e.what());
  }

  ModelWeights w = allocate_weights(c);
  std::uint64_t expected = 0;
  w.visit([&](const Matrix& m) { expected += static_cast<std::uint64_t>(m.size()); });
  w.visit_buffers([&](const Matrix& m) { expected += static_cast<std::uint64_t>(m.size()); });
  const auto count = in.uint<std::uint64_t>();
  if (count != expected) {
    throw FormatError(FormatError::Kind::HeaderMismatch, "weight file: parameter count " + std::to_string(count) +
                                                             " does not match config (" + std::to_string(expected) + ")");
  }
  in.need(static_cast<std::size_t>(count) * 4);
  auto read = [&](Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = in.f32();
  };
  w.visit(read);
  w.visit_buffers(read);
  if (in.remaining() != 0) {
    throw FormatError(FormatError::Kind::HeaderMismatch, "weight file: trailing bytes after parameters");
  }
  return w;
}

void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  detail::write_file(path, encode_weights(w));
}

ModelWeights load_weights(const std::filesystem::path& path) { return decode_weights(detail::read_file(path)); }

ModelWeights load_weights(const std::filesystem::path& path, const ModelConfig& expected) {
  ModelWeights w = load_weights(path);
  ModelConfig want = resolve(expected);
  if (!(w.config == want)) {
    throw FormatError(FormatError::Kind::HeaderMismatch,
                      "weight file config (" + to_string(w.config.variant) + ", depth " + std::to_string(w.config.depth) +
                          ", heads " + std::to_string(w.config.heads) + ") does not match the requested model (" +
                          to_string(want.variant) + ", depth " + std::to_string(want.depth) + ", heads " +
                          std::to_string(want.heads) + ")");
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward passes

Matrix assemble_tokens(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w) {
  if (w.config.variant == Variant::H1) throw ConfigError("assemble_tokens: single-image model has no pair layout");
  require_record(a, w.config, "assemble_tokens (a)");
  require_record(b, w.config, "assemble_tokens (b)");
  const Eigen::Index p = w.config.patches();
  Matrix z0(w.config.tokens(), w.config.dim);
  z0.row(0) = project_rows(w.cls_token, w, 0);
  z0.middleRows(1, p) = project_rows(a.patches, w, 1);
  z0.row(p + 1) = project_rows(w.sep_token, w, p + 1);
  z0.middleRows(p + 2, p) = project_rows(b.patches, w, p + 2);
  return z0;
}

Matrix assemble_tokens_single(const FaceRecord& a, const ModelWeights& w) {
  require_variant(w, Variant::H1, "assemble_tokens_single");
  require_record(a, w.config, "assemble_tokens_single");
  Matrix z0(w.config.tokens(), w.config.dim);
  z0.row(0) = project_rows(w.cls_token, w, 0);
  z0.middleRows(1, w.config.patches()) = project_rows(a.patches, w, 1);
  return z0;
}

Matrix run_encoder(const Matrix& z0, const ModelWeights& w, EncoderTrace* trace, std::vector<Matrix>* attn_maps) {
  Matrix z = z0;
  if (trace != nullptr) trace->layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    z = encoder_layer(z, w.layers[l], w.config.ln_eps, trace != nullptr ? &trace->layers[l] : nullptr, attn_maps);
  }
  require_finite(z, "encoder output");
  return z;
}

double cosine(const Matrix& a, const Matrix& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("cosine: zero-norm vector");
  return std::clamp(a.cwiseProduct(b).sum() / (na * nb), -1.0, 1.0);
}

PairScore score_pair_h2l(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w, const H2LOptions& options) {
  require_variant(w, Variant::H2L, "score_pair_h2l");
  const Matrix z = run_encoder(assemble_tokens(a, b, w), w);
  const Eigen::Index p = w.config.patches();
  PairScore s;
  if (options.mean_pool_heads) {
    s.f1 = z.middleRows(1, p).colwise().mean();
    s.f2 = z.middleRows(p + 2, p).colwise().mean();
  } else {
    s.f1 = head_forward(flatten_block(z, 1, p), w.fc1_w, w.fc1_b, w.bn1, w, nullptr);
    s.f2 = head_forward(flatten_block(z, p + 2, p), w.fc2_w, w.fc2_b, w.bn2, w, nullptr);
  }
  require_finite(s.f1, "h2l feature f1");
  require_finite(s.f2, "h2l feature f2");
  s.score = cosine(s.f1, s.f2);
  return s;
}

Matrix score_pair_h2(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w) {
  require_variant(w, Variant::H2, "score_pair_h2");
  return forward_h2(a, b, w).output;
}

Matrix embed_single_h1(const FaceRecord& a, const ModelWeights& w) {
  require_variant(w, Variant::H1, "embed_single_h1");
  return forward_h1(a, w).output;
}

// ---------------------------------------------------------------------------
// Cached H2L scorer

H2LScorer::H2LScorer(const ModelWeights& w) : w_(w) {
  require_variant(w, Variant::H2L, "H2LScorer");
  cls_ = prepare_rows(project_rows(w.cls_token, w, 0));
  sep_ = prepare_rows(project_rows(w.sep_token, w, w.config.sep_row()));
}

H2LScorer::Block H2LScorer::prepare_rows(const Matrix& z0) const {
  const LayerParams& first = w_.layers.front();
  Block b;
  b.qkv = project_qkv(layer_norm(z0, first.ln1, w_.config.ln_eps), first.attn);
  b.z0 = z0;
  return b;
}

H2LScorer::Block H2LScorer::prepare(const FaceRecord& r, int slot) const {
  if (slot != 0 && slot != 1) throw ConfigError("H2LScorer::prepare: slot must be 0 or 1");
  require_record(r, w_.config, "H2LScorer::prepare");
  const Eigen::Index first_row = slot == 0 ? 1 : w_.config.sep_row() + 1;
  return prepare_rows(project_rows(r.patches, w_, first_row));
}

Matrix H2LScorer::encode_many(const Block& first, std::span<const Block* const> seconds) const {
  const Eigen::Index p = w_.config.patches();
  const Eigen::Index t = w_.config.tokens();
  const auto n = static_cast<Eigen::Index>(seconds.size());
  const double eps = w_.config.ln_eps;

  // Layer 0 reuses the cached per-record projections.
  Matrix z(n * t, w_.config.dim);
  QKV qkv;
  const Eigen::Index inner = cls_.qkv.q.cols();
  qkv.q.resize(n * t, inner);
  qkv.k.resize(n * t, inner);
  qkv.v.resize(n * t, inner);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Block& second = *seconds[static_cast<std::size_t>(i)];
    const Eigen::Index r = i * t;
    auto place = [&](Matrix& dst, const Matrix& c, const Matrix& f, const Matrix& s, const Matrix& sec) {
      dst.row(r) = c;
      dst.middleRows(r + 1, p) = f;
      dst.row(r + p + 1) = s;
      dst.middleRows(r + p + 2, p) = sec;
    };
    place(z, cls_.z0, first.z0, sep_.z0, second.z0);
    place(qkv.q, cls_.qkv.q, first.qkv.q, sep_.qkv.q, second.qkv.q);
    place(qkv.k, cls_.qkv.k, first.qkv.k, sep_.qkv.k, second.qkv.k);
    place(qkv.v, cls_.qkv.v, first.qkv.v, sep_.qkv.v, second.qkv.v);
  }

  Matrix context(n * t, inner);
  for (std::size_t l = 0; l < w_.layers.size(); ++l) {
    const LayerParams& layer = w_.layers[l];
    if (l > 0) qkv = project_qkv(layer_norm(z, layer.ln1, eps), layer.attn);
    for (Eigen::Index i = 0; i < n; ++i) attention_context_rows(qkv, i * t, t, layer.attn, context);
    z = encoder_layer_tail(z, affine(context, layer.attn.wo, layer.attn.bo), layer, eps);
  }
  require_finite(z, "encoder output");
  return z;
}

PairScore H2LScorer::score(const Block& first, const Block& second) const {
  const Block* one[] = {&second};
  const Matrix z = encode_many(first, one);
  const Eigen::Index p = w_.config.patches();
  PairScore s;
  s.f1 = head_forward(flatten_block(z, 1, p), w_.fc1_w, w_.fc1_b, w_.bn1, w_, nullptr);
  s.f2 = head_forward(flatten_block(z, p + 2, p), w_.fc2_w, w_.fc2_b, w_.bn2, w_, nullptr);
  s.score = cosine(s.f1, s.f2);
  return s;
}

std::vector<double> H2LScorer::score_batch(const Block& first, std::span<const Block* const> seconds) const {
  const Eigen::Index p = w_.config.patches();
  const Eigen::Index t = w_.config.tokens();
  const Eigen::Index width = p * w_.config.dim;
  std::vector<double> scores;
  scores.reserve(seconds.size());
  for (std::size_t start = 0; start < seconds.size(); start += kHeadChunk) {
    const std::size_t n = std::min(kHeadChunk, seconds.size() - start);
    Matrix flat1(static_cast<Eigen::Index>(n), width);
    Matrix flat2(static_cast<Eigen::Index>(n), width);
    for (std::size_t sub = 0; sub < n; sub += kEncodeChunk) {
      const std::size_t m = std::min(kEncodeChunk, n - sub);
      const Matrix z = encode_many(first, seconds.subspan(start + sub, m));
      for (std::size_t i = 0; i < m; ++i) {
        const auto row = static_cast<Eigen::Index>(sub + i);
        const auto base = static_cast<Eigen::Index>(i) * t;
        flat1.row(row) = flatten_block(z, base + 1, p);
        flat2.row(row) = flatten_block(z, base + p + 2, p);
      }
    }
    const Matrix f1 = head_forward(flat1, w_.fc1_w, w_.fc1_b, w_.bn1, w_, nullptr);
    const Matrix f2 = head_forward(flat2, w_.fc2_w, w_.fc2_b, w_.bn2, w_, nullptr);
    require_finite(f1, "h2l feature f1");
    require_finite(f2, "h2l feature f2");
    for (Eigen::Index i = 0; i < f1.rows(); ++i) scores.push_back(cosine(f1.row(i), f2.row(i)));
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Traced passes for training

H2LTrace forward_h2l(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w) {
  require_variant(w, Variant::H2L, "forward_h2l");
  const Eigen::Index p = w.config.patches();
  H2LTrace t;
  t.z0 = assemble_tokens(a, b, w);
  t.z_out = run_encoder(t.z0, w, &t.encoder);
  t.f1 = head_forward(flatten_block(t.z_out, 1, p), w.fc1_w, w.fc1_b, w.bn1, w, &t.head1);
  t.f2 = head_forward(flatten_block(t.z_out, p + 2, p), w.fc2_w, w.fc2_b, w.bn2, w, &t.head2);
  require_finite(t.f1, "h2l feature f1");
  require_finite(t.f2, "h2l feature f2");
  return t;
}

void backward_h2l(const H2LTrace& t, const FaceRecord& a, const FaceRecord& b, const ModelWeights& w,
                  const Matrix& d_f1, const Matrix& d_f2, ModelWeights* grad) {
  const Eigen::Index p = w.config.patches();
  Matrix dz = Matrix::Zero(t.z_out.rows(), t.z_out.cols());
  unflatten_into(head_backward(t.head1, d_f1, w.fc1_w, w.bn1, w, grad, &grad->fc1_w, &grad->fc1_b, &grad->bn1), dz,
                 1, p);
  unflatten_into(head_backward(t.head2, d_f2, w.fc2_w, w.bn2, w, grad, &grad->fc2_w, &grad->fc2_b, &grad->bn2), dz,
                 p + 2, p);
  assemble_backward(encoder_backward(dz, w, t.encoder, grad), a, &b, w, grad);
}

ClsTrace forward_h2(const FaceRecord& a, const FaceRecord& b, const ModelWeights& w) {
  require_variant(w, Variant::H2, "forward_h2");
  ClsTrace t;
  t.z0 = assemble_tokens(a, b, w);
  t.z_out = run_encoder(t.z0, w, &t.encoder);
  cls_head(t.z_out, w, t);
  return t;
}

void backward_h2(const ClsTrace& t, const FaceRecord& a, const FaceRecord& b, const ModelWeights& w,
                 const Matrix& d_logits, ModelWeights* grad) {
  const Matrix dz = cls_head_backward(t, d_logits, w, grad);
  assemble_backward(encoder_backward(dz, w, t.encoder, grad), a, &b, w, grad);
}

ClsTrace forward_h1(const FaceRecord& a, const ModelWeights& w) {
  require_variant(w, Variant::H1, "forward_h1");
  ClsTrace t;
  t.z0 = assemble_tokens_single(a, w);
  t.z_out = run_encoder(t.z0, w, &t.encoder);
  cls_head(t.z_out, w, t);
  return t;
}

void backward_h1(const ClsTrace& t, const FaceRecord& a, const ModelWeights& w, const Matrix& d_embedding,
                 ModelWeights* grad) {
  const Matrix dz = cls_head_backward(t, d_embedding, w, grad);
  assemble_backward(encoder_backward(dz, w, t.encoder, grad), a, nullptr, w, grad);
}

}  // namespace fvit
