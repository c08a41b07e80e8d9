#include "fvit/nn_core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fvit/error.hpp"

#if defined(FVIT_HAVE_MVEC) && defined(__AVX2__)
#include <immintrin.h>
// glibc's vector math library (4-lane AVX2 erf, within 1 ulp of std::erf).
extern "C" __m256d _ZGVdN4v_erf(__m256d);
#define FVIT_VECTOR_ERF 1
#endif

namespace fvit {

namespace {

void require_cols(const Matrix& m, Eigen::Index cols, const char* what) {
  if (m.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(cols) +
                         " columns, got " + std::to_string(m.cols()));
  }
}

void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
  }
}

// x[i] <- erf(x[i] / sqrt 2) (cdf = false: 0.5 x (1 + erf(x / sqrt 2)), the
// GELU itself). In place to keep large activations from being reallocated.
// Every element takes the same code path (the tail is padded), so results
// do not depend on matrix shape.
void gelu_inplace(double* x, Eigen::Index n, bool cdf_only) {
#ifdef FVIT_VECTOR_ERF
  const __m256d scale = _mm256_set1_pd(1.0 / std::numbers::sqrt2);
  const __m256d half = _mm256_set1_pd(0.5);
  const __m256d one = _mm256_set1_pd(1.0);
  auto apply = [&](double* at) {
    const __m256d v = _mm256_loadu_pd(at);
    const __m256d e = _ZGVdN4v_erf(_mm256_mul_pd(v, scale));
    _mm256_storeu_pd(at, cdf_only ? e : _mm256_mul_pd(_mm256_mul_pd(half, v), _mm256_add_pd(one, e)));
  };
  Eigen::Index i = 0;
  for (; i + 4 <= n; i += 4) apply(x + i);
  if (i < n) {
    double buf[4] = {0.0, 0.0, 0.0, 0.0};
    std::copy(x + i, x + n, buf);
    apply(buf);
    std::copy(buf, buf + (n - i), x + i);
  }
#else
  for (Eigen::Index i = 0; i < n; ++i) {
    const double e = std::erf(x[i] / std::numbers::sqrt2);
    x[i] = cdf_only ? e : 0.5 * x[i] * (1.0 + e);
  }
#endif
}

Matrix gelu_derivative_matrix(const Matrix& x) {
  Matrix cdf = x;
  gelu_inplace(cdf.data(), cdf.size(), true);
  constexpr double k = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return (0.5 * (1.0 + cdf.array()) + x.array() * (-0.5 * x.array().square()).exp() * k).matrix();
}

}  // namespace

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.rows()) throw DimensionError("affine: input/weight mismatch");
  require_shape(b, 1, w.cols(), "affine bias");
  Matrix y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double e = std::exp(x(i, j) - mx);
      y(i, j) = e;
      sum += e;
    }
    y.row(i) /= sum;
  }
  return y;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double dot = y.row(i).dot(dy.row(i));
    dx.row(i) = (y.row(i).array() * (dy.row(i).array() - dot)).matrix();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// LayerNorm

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, double eps, LayerNormCache* cache) {
  require_shape(p.gamma, 1, x.cols(), "layer_norm gamma");
  require_shape(p.beta, 1, x.cols(), "layer_norm beta");
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");

  const auto n = static_cast<double>(x.cols());
  Matrix xhat(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).sum() / n;
    const auto centered = (x.row(i).array() - mean).matrix();
    const double var = centered.squaredNorm() / n;
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * p.gamma.row(0).array();
  y.rowwise() += p.beta.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormParams& p, const LayerNormCache& cache,
                           LayerNormParams* grad) {
  const auto n = static_cast<double>(dy.cols());
  if (grad != nullptr) {
    grad->gamma += dy.cwiseProduct(cache.xhat).colwise().sum();
    grad->beta += dy.colwise().sum();
  }
  const Matrix dxhat = dy.array().rowwise() * p.gamma.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double sum_d = dxhat.row(i).sum();
    const double sum_dx = dxhat.row(i).dot(cache.xhat.row(i));
    dx.row(i) = (cache.inv_std(i) / n) *
                (n * dxhat.row(i).array() - sum_d - cache.xhat.row(i).array() * sum_dx).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Attention

QKV project_qkv(const Matrix& tokens, const AttentionParams& p) {
  require_cols(tokens, p.wq.rows(), "attention input");
  return {affine(tokens, p.wq, p.bq), affine(tokens, p.wk, p.bk), affine(tokens, p.wv, p.bv)};
}

AttentionOutput attend(const QKV& qkv, const AttentionParams& p) {
  const Eigen::Index t = qkv.q.rows();
  const Eigen::Index dh = p.head_dim;
  if (qkv.q.cols() != p.inner_dim() || qkv.k.rows() != t || qkv.v.rows() != t) {
    throw DimensionError("attend: Q/K/V shape mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionOutput out;
  out.context.resize(t, p.inner_dim());
  out.attn.reserve(static_cast<std::size_t>(p.heads));
  Matrix scores(t, t);
  for (int h = 0; h < p.heads; ++h) {
    const auto q = qkv.q.middleCols(h * dh, dh);
    const auto k = qkv.k.middleCols(h * dh, dh);
    const auto v = qkv.v.middleCols(h * dh, dh);
    scores.noalias() = q * k.transpose();
    scores *= scale;
    Matrix a = softmax_rows(scores);
    out.context.middleCols(h * dh, dh).noalias() = a * v;
    out.attn.push_back(std::move(a));
  }
  out.out = affine(out.context, p.wo, p.bo);
  return out;
}

void attention_context_rows(const QKV& qkv, Eigen::Index first, Eigen::Index count, const AttentionParams& p,
                            Matrix& context) {
  const Eigen::Index dh = p.head_dim;
  if (qkv.q.cols() != p.inner_dim() || context.cols() != p.inner_dim() || first < 0 ||
      first + count > qkv.q.rows() || context.rows() != qkv.q.rows()) {
    throw DimensionError("attention_context_rows: shape mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix scores(count, count);
  for (int h = 0; h < p.heads; ++h) {
    const auto q = qkv.q.block(first, h * dh, count, dh);
    const auto k = qkv.k.block(first, h * dh, count, dh);
    const auto v = qkv.v.block(first, h * dh, count, dh);
    scores.noalias() = q * k.transpose();
    scores *= scale;
    context.block(first, h * dh, count, dh).noalias() = softmax_rows(scores) * v;
  }
}

AttentionOutput multi_head_attention(const Matrix& tokens, const AttentionParams& p, QKV* qkv_out) {
  if (tokens.rows() < 1) throw DimensionError("multi_head_attention: no tokens");
  require_finite(tokens, "multi_head_attention input");
  QKV qkv = project_qkv(tokens, p);
  AttentionOutput out = attend(qkv, p);
  if (qkv_out != nullptr) *qkv_out = std::move(qkv);
  return out;
}

Matrix multi_head_attention_backward(const Matrix& tokens, const AttentionParams& p, const QKV& qkv,
                                     const AttentionOutput& fwd, const Matrix& dout,
                                     AttentionParams* grad) {
  const Eigen::Index t = tokens.rows();
  const Eigen::Index dh = p.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (grad != nullptr) {
    grad->wo.noalias() += fwd.context.transpose() * dout;
    grad->bo += dout.colwise().sum();
  }
  const Matrix dcontext = dout * p.wo.transpose();

  Matrix dq(t, p.inner_dim()), dk(t, p.inner_dim()), dv(t, p.inner_dim());
  for (int h = 0; h < p.heads; ++h) {
    const auto q = qkv.q.middleCols(h * dh, dh);
    const auto k = qkv.k.middleCols(h * dh, dh);
    const auto v = qkv.v.middleCols(h * dh, dh);
    const Matrix& a = fwd.attn[static_cast<std::size_t>(h)];
    const auto dc = dcontext.middleCols(h * dh, dh);

    const Matrix da = dc * v.transpose();
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * dc;
    const Matrix ds = softmax_rows_backward(a, da) * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * k;
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * q;
  }

  if (grad != nullptr) {
    grad->wq.noalias() += tokens.transpose() * dq;
    grad->bq += dq.colwise().sum();
    grad->wk.noalias() += tokens.transpose() * dk;
    grad->bk += dk.colwise().sum();
    grad->wv.noalias() += tokens.transpose() * dv;
    grad->bv += dv.colwise().sum();
  }
  Matrix dx(t, tokens.cols());
  dx.noalias() = dq * p.wq.transpose();
  dx.noalias() += dk * p.wk.transpose();
  dx.noalias() += dv * p.wv.transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// MLP

Matrix mlp_block(const Matrix& x, const MlpParams& p, MlpCache* cache) {
  require_cols(x, p.w1.rows(), "mlp_block input");
  Matrix pre = affine(x, p.w1, p.b1);
  if (cache == nullptr) {
    gelu_inplace(pre.data(), pre.size(), false);
    return affine(pre, p.w2, p.b2);
  }
  Matrix act = pre;
  gelu_inplace(act.data(), act.size(), false);
  Matrix y = affine(act, p.w2, p.b2);
  cache->pre = std::move(pre);
  cache->act = std::move(act);
  return y;
}

Matrix mlp_block_backward(const Matrix& x, const MlpParams& p, const MlpCache& cache,
                          const Matrix& dy, MlpParams* grad) {
  if (grad != nullptr) {
    grad->w2.noalias() += cache.act.transpose() * dy;
    grad->b2 += dy.colwise().sum();
  }
  const Matrix dact = dy * p.w2.transpose();
  const Matrix dpre = dact.cwiseProduct(gelu_derivative_matrix(cache.pre));
  if (grad != nullptr) {
    grad->w1.noalias() += x.transpose() * dpre;
    grad->b1 += dpre.colwise().sum();
  }
  return dpre * p.w1.transpose();
}

// ---------------------------------------------------------------------------
// Encoder layer

Matrix encoder_layer(const Matrix& z, const LayerParams& p, double eps, EncoderLayerCache* cache,
                     std::vector<Matrix>* attn_maps) {
  LayerNormCache ln1_cache;
  Matrix h = layer_norm(z, p.ln1, eps, &ln1_cache);
  QKV qkv;
  AttentionOutput attn = multi_head_attention(h, p.attn, &qkv);
  Matrix mid = z + attn.out;

  LayerNormCache ln2_cache;
  Matrix h2 = layer_norm(mid, p.ln2, eps, &ln2_cache);
  MlpCache mlp_cache;
  Matrix out = mid + mlp_block(h2, p.mlp, &mlp_cache);

  if (attn_maps != nullptr) {
    attn_maps->insert(attn_maps->end(), attn.attn.begin(), attn.attn.end());
  }
  if (cache != nullptr) {
    cache->input = z;
    cache->ln1 = std::move(ln1_cache);
    cache->ln1_out = std::move(h);
    cache->qkv = std::move(qkv);
    cache->attn = std::move(attn);
    cache->mid = std::move(mid);
    cache->ln2 = std::move(ln2_cache);
    cache->ln2_out = std::move(h2);
    cache->mlp = std::move(mlp_cache);
  }
  return out;
}

Matrix encoder_layer_tail(const Matrix& z, const Matrix& attn_out, const LayerParams& p,
                          double eps) {
  Matrix mid = z + attn_out;
  const Matrix h2 = layer_norm(mid, p.ln2, eps);
  mid += mlp_block(h2, p.mlp);
  return mid;
}

Matrix encoder_layer_backward(const Matrix& dz_out, const LayerParams& p, double /*eps*/,
                              const EncoderLayerCache& cache, LayerParams* grad) {
  // out = mid + MLP(LN2(mid)); mid = in + MSA(LN1(in))
  const Matrix dh2 = mlp_block_backward(cache.ln2_out, p.mlp, cache.mlp, dz_out,
                                        grad != nullptr ? &grad->mlp : nullptr);
  const Matrix dmid =
      dz_out + layer_norm_backward(dh2, p.ln2, cache.ln2, grad != nullptr ? &grad->ln2 : nullptr);
  const Matrix dh = multi_head_attention_backward(cache.ln1_out, p.attn, cache.qkv, cache.attn,
                                                  dmid, grad != nullptr ? &grad->attn : nullptr);
  return dmid + layer_norm_backward(dh, p.ln1, cache.ln1, grad != nullptr ? &grad->ln1 : nullptr);
}

}  // namespace fvit
