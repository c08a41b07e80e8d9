#pragma once

// Dense building blocks for the hybrid ViT: row-major f64 matrices, LayerNorm,
// multi-head attention, GELU MLP and a pre-norm encoder layer, each with a
// hand-written reverse pass. Tokens are rows; features are columns.

#include <Eigen/Dense>

#include <vector>

namespace fvit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Throws NumericError if any entry of `m` is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

/// x * w + b with b broadcast over rows (b is 1 x cols).
Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b);

/// Row-wise numerically stable softmax.
Matrix softmax_rows(const Matrix& x);
Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy);

double gelu(double x);
double gelu_derivative(double x);

struct LayerNormParams {
  Matrix gamma;  // 1 x D
  Matrix beta;   // 1 x D

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

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, double eps,
                  LayerNormCache* cache = nullptr);
/// Returns dL/dx and accumulates parameter gradients into `grad`.
Matrix layer_norm_backward(const Matrix& dy, const LayerNormParams& p,
                           const LayerNormCache& cache, LayerNormParams* grad);

struct AttentionParams {
  int heads = 1;
  int head_dim = 1;
  Matrix wq, bq;  // D x inner, 1 x inner
  Matrix wk, bk;
  Matrix wv, bv;
  Matrix wo, bo;  // inner x D, 1 x D

  int inner_dim() const { return heads * head_dim; }

  template <class F>
  void visit(F&& f) {
    visit_fields(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_fields(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_fields(Self& s, F& f) {
    f(s.wq);
    f(s.bq);
    f(s.wk);
    f(s.bk);
    f(s.wv);
    f(s.bv);
    f(s.wo);
    f(s.bo);
  }
};

struct QKV {
  Matrix q, k, v;  // T x inner each
};

struct AttentionOutput {
  Matrix out;                 // T x D
  std::vector<Matrix> attn;   // one T x T row-stochastic matrix per head
  Matrix context;             // T x inner, concatenated A*V
};

QKV project_qkv(const Matrix& tokens, const AttentionParams& p);

/// Scaled dot-product attention over pre-projected Q/K/V followed by the
/// output projection.
AttentionOutput attend(const QKV& qkv, const AttentionParams& p);

/// Attention context (concatenated A*V, no output projection) for the token
/// rows [first, first + count) of stacked Q/K/V, attending only within that
/// range. Written into the same rows of `context`. Lets several independent
/// sequences share the projection GEMMs.
void attention_context_rows(const QKV& qkv, Eigen::Index first, Eigen::Index count, const AttentionParams& p,
                            Matrix& context);

/// Full multi-head self-attention on a token matrix.
AttentionOutput multi_head_attention(const Matrix& tokens, const AttentionParams& p,
                                     QKV* qkv_out = nullptr);

/// Reverse pass; `grad` accumulates. Returns dL/dtokens.
Matrix multi_head_attention_backward(const Matrix& tokens, const AttentionParams& p,
                                     const QKV& qkv, const AttentionOutput& fwd,
                                     const Matrix& dout, AttentionParams* grad);

struct MlpParams {
  Matrix w1, b1;  // D x m, 1 x m
  Matrix w2, b2;  // m x D, 1 x D

  template <class F>
  void visit(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
  template <class F>
  void visit(F&& f) const {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
};

struct MlpCache {
  Matrix pre;  // pre-activation
  Matrix act;  // GELU(pre)
};

Matrix mlp_block(const Matrix& x, const MlpParams& p, MlpCache* cache = nullptr);
Matrix mlp_block_backward(const Matrix& x, const MlpParams& p, const MlpCache& cache,
                          const Matrix& dy, MlpParams* grad);

/// One pre-norm encoder layer: z' = z + MSA(LN1(z)); z'' = z' + MLP(LN2(z')).
struct LayerParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;

  template <class F>
  void visit(F&& f) {
    ln1.visit(f);
    attn.visit(f);
    ln2.visit(f);
    mlp.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    ln1.visit(f);
    attn.visit(f);
    ln2.visit(f);
    mlp.visit(f);
  }
};

struct EncoderLayerCache {
  Matrix input;
  LayerNormCache ln1;
  Matrix ln1_out;
  QKV qkv;
  AttentionOutput attn;
  Matrix mid;  // residual stream after attention
  LayerNormCache ln2;
  Matrix ln2_out;
  MlpCache mlp;
};

Matrix encoder_layer(const Matrix& z, const LayerParams& p, double eps,
                     EncoderLayerCache* cache = nullptr,
                     std::vector<Matrix>* attn_maps = nullptr);

/// Finishes a layer whose attention sub-block was computed elsewhere
/// (`attn_out` = MSA(LN1(z))). Used by the cached inference path.
Matrix encoder_layer_tail(const Matrix& z, const Matrix& attn_out, const LayerParams& p,
                          double eps);

Matrix encoder_layer_backward(const Matrix& dz_out, const LayerParams& p, double eps,
                              const EncoderLayerCache& cache, LayerParams* grad);

/// Copy of `p` with every parameter block zero-filled (same shapes).
template <class P>
P zeros_like(const P& p) {
  P z = p;
  z.visit([](Matrix& m) { m.setZero(); });
  return z;
}

/// Number of scalars across all blocks of `p`.
template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  p.visit([&](const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <class P>
std::vector<double> flatten_params(const P& p) {
  std::vector<double> out;
  out.reserve(parameter_count(p));
  p.visit([&](const Matrix& m) { out.insert(out.end(), m.data(), m.data() + m.size()); });
  return out;
}

template <class P>
void unflatten_params(P& p, const double* data) {
  p.visit([&](Matrix& m) {
    std::copy(data, data + m.size(), m.data());
    data += m.size();
  });
}

}  // namespace fvit
