#include "fvit/embedding_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "fvit/error.hpp"

namespace fvit {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'E', 'B'};
constexpr std::uint16_t kVersionFixed = 1;
constexpr std::uint16_t kVersionShaped = 2;

// Salts that separate the independent random streams.
constexpr std::uint32_t kTemplateSalt = 0x7E3A1;
constexpr std::uint32_t kOccluderSalt = 0x0CC1D;
constexpr std::uint32_t kIdentitySalt = 0x1D;
constexpr std::uint32_t kQueryPickSalt = 0x9E;

std::mt19937_64 make_stream(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  return m;
}

Matrix face_template(int grid, int dim) {
  auto rng = make_stream({kTemplateSalt, static_cast<std::uint64_t>(grid),
                          static_cast<std::uint64_t>(dim)});
  return gaussian(rng, static_cast<Eigen::Index>(grid) * grid, dim, 1.0);
}

FaceRecord make_record(int identity, Matrix patches) {
  FaceRecord r;
  r.identity = identity;
  r.patches = patches.unaryExpr(&to_f32);
  r.image_vec = mean_patch(r.patches).unaryExpr(&to_f32);
  return r;
}

}  // namespace

std::string to_string(Occlusion o) {
  switch (o) {
    case Occlusion::None:
      return "none";
    case Occlusion::Mask:
      return "mask";
    case Occlusion::Sunglasses:
      return "sunglasses";
  }
  return "unknown";
}

Occlusion occlusion_from_string(const std::string& s) {
  if (s == "none") return Occlusion::None;
  if (s == "mask") return Occlusion::Mask;
  if (s == "sunglasses") return Occlusion::Sunglasses;
  throw ConfigError("unknown occlusion kind: " + s);
}

std::pair<int, int> occluded_grid_rows(Occlusion o, int grid) {
  switch (o) {
    case Occlusion::None:
      return {0, 0};
    case Occlusion::Mask:
      return {grid - (3 * grid + 7) / 8, grid};
    case Occlusion::Sunglasses:
      return {grid / 4, std::max(grid / 2, grid / 4 + 1)};
  }
  return {0, 0};
}

int FaceRecord::grid() const {
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches.rows()))));
  return g;
}

bool FaceRecord::operator==(const FaceRecord& o) const {
  return identity == o.identity && occlusion == o.occlusion && image_vec.rows() == o.image_vec.rows() &&
         image_vec.cols() == o.image_vec.cols() && patches.rows() == o.patches.rows() &&
         patches.cols() == o.patches.cols() && image_vec == o.image_vec && patches == o.patches;
}

void validate_record(const FaceRecord& r) {
  if (r.identity < 0) throw ConfigError("face record: negative identity");
  const int g = r.grid();
  if (r.patches.rows() < 1 || g * g != r.patches.rows()) {
    throw DimensionError("face record: patch count is not a square grid");
  }
  if (r.patches.cols() < 1 || r.image_vec.rows() != 1 || r.image_vec.cols() != r.patches.cols()) {
    throw DimensionError("face record: image_vec / patch dimension mismatch");
  }
  require_finite(r.patches, "face record patches");
  require_finite(r.image_vec, "face record image_vec");
}

Matrix mean_patch(const Matrix& patches) {
  return patches.colwise().sum() / static_cast<double>(patches.rows());
}

// ---------------------------------------------------------------------------
// Gallery

Gallery::Gallery(std::vector<FaceRecord> records) {
  records_.reserve(records.size());
  for (auto& r : records) add(std::move(r));
}

void Gallery::add(FaceRecord r) {
  validate_record(r);
  if (!records_.empty() && (r.dim() != records_.front().dim() ||
                            r.num_patches() != records_.front().num_patches())) {
    throw DimensionError("gallery: record shape differs from existing records");
  }
  ++id_counts_[r.identity];
  records_.push_back(std::move(r));
}

int Gallery::count(int identity) const {
  const auto it = id_counts_.find(identity);
  return it == id_counts_.end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------
// Generator

void validate(const SynthConfig& cfg) {
  if (cfg.n_identities < 2) throw ConfigError("synth: need at least 2 identities");
  if (cfg.records_per_identity < 2) throw ConfigError("synth: need at least 2 records per identity");
  if (cfg.queries_per_identity < 0) throw ConfigError("synth: negative query count");
  // sigma == 0 is the noise-free case (every record equals its prototype).
  if (!(cfg.sigma >= 0.0) || !std::isfinite(cfg.sigma)) throw ConfigError("synth: sigma must be >= 0");
  if (!(cfg.occluded_fraction >= 0.0 && cfg.occluded_fraction <= 1.0)) {
    throw ConfigError("synth: occluded_fraction must lie in [0, 1]");
  }
  if (cfg.grid < 1 || cfg.dim < 1) throw ConfigError("synth: grid and dim must be positive");
  if (cfg.identity_spread < 0.0 || cfg.occluder_scale < 0.0) {
    throw ConfigError("synth: negative spread or occluder scale");
  }
  if (cfg.occlusion_kind == Occlusion::None && cfg.occluded_fraction > 0.0) {
    throw ConfigError("synth: occluded_fraction > 0 requires an occlusion kind");
  }
}

Matrix occluder_pattern(Occlusion kind, int grid, int dim, double scale) {
  auto rng = make_stream({kOccluderSalt, static_cast<std::uint64_t>(kind),
                          static_cast<std::uint64_t>(grid), static_cast<std::uint64_t>(dim)});
  return gaussian(rng, static_cast<Eigen::Index>(grid) * grid, dim, scale);
}

FaceRecord apply_occlusion(const FaceRecord& r, Occlusion kind, double scale) {
  if (kind == Occlusion::None) return r;
  const int g = r.grid();
  const auto [first, last] = occluded_grid_rows(kind, g);
  const Matrix pattern = occluder_pattern(kind, g, r.dim(), scale).unaryExpr(&to_f32);
  FaceRecord out = r;
  out.occlusion = kind;
  out.patches.middleRows(first * g, (last - first) * g) = pattern.middleRows(first * g, (last - first) * g);
  out.image_vec = mean_patch(out.patches).unaryExpr(&to_f32);
  return out;
}

SyntheticSet generate_synthetic(const SynthConfig& cfg) {
  validate(cfg);
  const Matrix tmpl = face_template(cfg.grid, cfg.dim);
  const Eigen::Index n_patches = static_cast<Eigen::Index>(cfg.grid) * cfg.grid;

  SyntheticSet out;
  std::vector<FaceRecord> queries;
  for (int k = 0; k < cfg.n_identities; ++k) {
    auto rng = make_stream({kIdentitySalt, cfg.seed, static_cast<std::uint64_t>(k)});
    const Matrix proto = tmpl + gaussian(rng, n_patches, cfg.dim, cfg.identity_spread);
    for (int j = 0; j < cfg.records_per_identity; ++j) {
      out.gallery.add(make_record(k, proto + gaussian(rng, n_patches, cfg.dim, cfg.sigma)));
    }
    for (int j = 0; j < cfg.queries_per_identity; ++j) {
      queries.push_back(make_record(k, proto + gaussian(rng, n_patches, cfg.dim, cfg.sigma)));
    }
  }

  std::vector<std::size_t> order(queries.size());
  std::iota(order.begin(), order.end(), 0);
  auto pick = make_stream({kQueryPickSalt, cfg.seed});
  std::shuffle(order.begin(), order.end(), pick);
  const auto n_occluded = static_cast<std::size_t>(
      std::llround(cfg.occluded_fraction * static_cast<double>(queries.size())));
  for (std::size_t i = 0; i < n_occluded; ++i) {
    auto& q = queries[order[i]];
    q = apply_occlusion(q, cfg.occlusion_kind, cfg.occluder_scale);
  }
  for (auto& q : queries) out.queries.add(std::move(q));
  return out;
}

// ---------------------------------------------------------------------------
// Binary format

std::vector<std::uint8_t> encode_gallery(const Gallery& g) {
  detail::ByteWriter w;
  const bool fixed = g.empty() || (g[0].dim() == kDefaultDim && g[0].num_patches() == kDefaultGrid * kDefaultGrid);
  w.bytes(kMagic, 4);
  w.uint<std::uint16_t>(fixed ? kVersionFixed : kVersionShaped);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(g.size()));
  if (!fixed) {
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(g[0].grid()));
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(g[0].dim()));
  }
  for (const auto& r : g.records()) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.identity));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.occlusion));
    for (Eigen::Index i = 0; i < r.image_vec.size(); ++i) w.f32(r.image_vec.data()[i]);
    for (Eigen::Index i = 0; i < r.patches.size(); ++i) w.f32(r.patches.data()[i]);
  }
  return std::move(w.buffer());
}

Gallery decode_gallery(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != std::string(kMagic, 4)) {
    throw FormatError(FormatError::Kind::BadMagic, "not an FVEB gallery file (bad magic)");
  }
  const auto version = r.uint<std::uint16_t>();
  if (version != kVersionFixed && version != kVersionShaped) {
    throw FormatError(FormatError::Kind::VersionMismatch,
                      "unsupported FVEB version " + std::to_string(version));
  }
  const auto count = r.uint<std::uint32_t>();
  int grid = kDefaultGrid;
  int dim = kDefaultDim;
  if (version == kVersionShaped) {
    grid = r.uint<std::uint16_t>();
    dim = r.uint<std::uint16_t>();
    if (grid < 1 || dim < 1) throw FormatError(FormatError::Kind::HeaderMismatch, "FVEB: zero grid or dim");
  }
  const std::size_t n_patches = static_cast<std::size_t>(grid) * grid;
  const std::size_t record_bytes = 5 + 4 * static_cast<std::size_t>(dim) * (1 + n_patches);
  if (r.remaining() < static_cast<std::size_t>(count) * record_bytes) {
    throw FormatError(FormatError::Kind::Truncated,
                      "truncated FVEB file: " + std::to_string(count) + " records declared");
  }

  Gallery g;
  for (std::uint32_t n = 0; n < count; ++n) {
    FaceRecord rec;
    rec.identity = static_cast<int>(r.uint<std::uint32_t>());
    const auto occ = r.uint<std::uint8_t>();
    if (occ > 2) throw FormatError(FormatError::Kind::HeaderMismatch, "FVEB: bad occlusion code");
    rec.occlusion = static_cast<Occlusion>(occ);
    rec.image_vec.resize(1, dim);
    for (Eigen::Index i = 0; i < rec.image_vec.size(); ++i) rec.image_vec.data()[i] = r.f32();
    rec.patches.resize(static_cast<Eigen::Index>(n_patches), dim);
    for (Eigen::Index i = 0; i < rec.patches.size(); ++i) rec.patches.data()[i] = r.f32();
    g.add(std::move(rec));
  }
  return g;
}

void save_gallery(const Gallery& g, const std::filesystem::path& path) {
  detail::write_file(path, encode_gallery(g));
}

Gallery load_gallery(const std::filesystem::path& path) { return decode_gallery(detail::read_file(path)); }

void export_gallery_text(const Gallery& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot open " + path.string());
  char buf[32];
  for (const auto& r : g.records()) {
    out << r.identity << ',' << to_string(r.occlusion);
    for (Eigen::Index i = 0; i < r.image_vec.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.9g", r.image_vec.data()[i]);
      out << buf;
    }
    for (Eigen::Index i = 0; i < r.patches.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.9g", r.patches.data()[i]);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace fvit
