#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fvit/embedding_store.hpp"
#include "fvit/grad_check.hpp"
#include "fvit/nn_core.hpp"

namespace fvit::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline FaceRecord random_record(int grid, int dim, std::uint64_t seed, int identity = 0, double scale = 1.0) {
  FaceRecord r;
  r.identity = identity;
  r.patches = random_matrix(grid * grid, dim, seed, scale);
  r.image_vec = mean_patch(r.patches);
  return r;
}

inline AttentionParams random_attention(int dim, int heads, int head_dim, std::uint64_t seed, double scale = 0.3) {
  AttentionParams p;
  p.heads = heads;
  p.head_dim = head_dim;
  const int inner = heads * head_dim;
  p.wq = random_matrix(dim, inner, seed + 1, scale);
  p.bq = random_matrix(1, inner, seed + 2, scale);
  p.wk = random_matrix(dim, inner, seed + 3, scale);
  p.bk = random_matrix(1, inner, seed + 4, scale);
  p.wv = random_matrix(dim, inner, seed + 5, scale);
  p.bv = random_matrix(1, inner, seed + 6, scale);
  p.wo = random_matrix(inner, dim, seed + 7, scale);
  p.bo = random_matrix(1, dim, seed + 8, scale);
  return p;
}

inline LayerNormParams random_layer_norm(int dim, std::uint64_t seed) {
  LayerNormParams p;
  p.gamma = (random_matrix(1, dim, seed, 0.2).array() + 1.0).matrix();
  p.beta = random_matrix(1, dim, seed + 1, 0.2);
  return p;
}

inline MlpParams random_mlp(int dim, int width, std::uint64_t seed, double scale = 0.4) {
  MlpParams p;
  p.w1 = random_matrix(dim, width, seed, scale);
  p.b1 = random_matrix(1, width, seed + 1, scale);
  p.w2 = random_matrix(width, dim, seed + 2, scale);
  p.b2 = random_matrix(1, dim, seed + 3, scale);
  return p;
}

inline LayerParams random_layer(int dim, int heads, int head_dim, int width, std::uint64_t seed) {
  LayerParams p;
  p.ln1 = random_layer_norm(dim, seed);
  p.attn = random_attention(dim, heads, head_dim, seed + 10);
  p.ln2 = random_layer_norm(dim, seed + 20);
  p.mlp = random_mlp(dim, width, seed + 30);
  return p;
}

inline std::vector<double> to_vector(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

inline Matrix from_span(std::span<const double> v, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fvit_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fvit::test
