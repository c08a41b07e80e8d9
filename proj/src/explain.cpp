#include "fvit/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "fvit/error.hpp"

namespace fvit {

namespace {

Matrix directional_map(const Matrix& patches, const Matrix& other, int grid) {
  const RowVector pooled = other.colwise().mean();
  const Eigen::VectorXd dots = patches * pooled.transpose();
  return Eigen::Map<const Matrix>(dots.data(), grid, grid);
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string() + " for writing");
  return out;
}

void write_matrix_csv(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  char buf[32];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", m(i, j));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

}  // namespace

Matrix normalize_map(const Matrix& raw) {
  const double lo = raw.minCoeff();
  const double range = raw.maxCoeff() - lo;
  if (!(range > 0.0)) return Matrix::Zero(raw.rows(), raw.cols());
  return (raw.array() - lo) / range;
}

HeatmapPair cc_heatmap(const FaceRecord& a, const FaceRecord& b) {
  if (a.patches.rows() != b.patches.rows() || a.patches.cols() != b.patches.cols()) {
    throw DimensionError("cc_heatmap: records have different patch shapes");
  }
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(a.patches.rows()))));
  if (grid < 1 || grid * grid != a.patches.rows()) throw DimensionError("cc_heatmap: patch count is not a square grid");
  HeatmapPair h;
  h.a_to_b.raw = directional_map(a.patches, b.patches, grid);
  h.a_to_b.normalized = normalize_map(h.a_to_b.raw);
  h.b_to_a.raw = directional_map(b.patches, a.patches, grid);
  h.b_to_a.normalized = normalize_map(h.b_to_a.raw);
  return h;
}

void write_heatmap_csv(const Matrix& map, const std::filesystem::path& path) { write_matrix_csv(map, path); }

void write_flow_csv(const Matrix& flow, const std::filesystem::path& path) { write_matrix_csv(flow, path); }

void write_heatmap_pgm(const Matrix& normalized, const std::filesystem::path& path, int side) {
  if (side < 1) throw ConfigError("write_heatmap_pgm: side must be positive");
  if (normalized.size() == 0) throw DimensionError("write_heatmap_pgm: empty map");
  std::ofstream out = open_out(path, std::ios::binary);
  out << "P5\n" << side << ' ' << side << "\n255\n";
  std::string row(static_cast<std::size_t>(side), '\0');
  for (int y = 0; y < side; ++y) {
    const Eigen::Index r = static_cast<Eigen::Index>(y) * normalized.rows() / side;
    for (int x = 0; x < side; ++x) {
      const Eigen::Index c = static_cast<Eigen::Index>(x) * normalized.cols() / side;
      const double v = std::clamp(normalized(r, c), 0.0, 1.0);
      row[static_cast<std::size_t>(x)] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    out.write(row.data(), side);
  }
  if (!out) throw FormatError(FormatError::Kind::Io, "write failed: " + path.string());
}

}  // namespace fvit
