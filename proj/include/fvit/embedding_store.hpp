#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fvit/nn_core.hpp"

namespace fvit {

inline constexpr int kDefaultDim = 512;
inline constexpr int kDefaultGrid = 8;

enum class Occlusion : std::uint8_t { None = 0, Mask = 1, Sunglasses = 2 };

std::string to_string(Occlusion o);
Occlusion occlusion_from_string(const std::string& s);

/// Grid rows [first, last) covered by an occluder on a grid x grid layout.
/// Mask covers the bottom 3/8 of the rows (rows 5-7 on 8x8), sunglasses rows
/// 2-3 on 8x8 (the second quarter in general).
std::pair<int, int> occluded_grid_rows(Occlusion o, int grid);

/// One face: identity label, image-level embedding and a grid of patch
/// embeddings, patch i at grid position (i / grid, i % grid).
struct FaceRecord {
  int identity = 0;
  Occlusion occlusion = Occlusion::None;
  Matrix image_vec;  // 1 x D
  Matrix patches;    // grid^2 x D

  int dim() const { return static_cast<int>(patches.cols()); }
  int grid() const;
  int num_patches() const { return static_cast<int>(patches.rows()); }

  bool operator==(const FaceRecord& o) const;
};

/// Throws DimensionError / NumericError / ConfigError on a malformed record.
void validate_record(const FaceRecord& r);

/// Ordered collection of records with per-identity counts. Also used for
/// query sets, where the occlusion tag matters.
class Gallery {
 public:
  Gallery() = default;
  explicit Gallery(std::vector<FaceRecord> records);

  void add(FaceRecord r);

  const std::vector<FaceRecord>& records() const { return records_; }
  const FaceRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::map<int, int>& id_counts() const { return id_counts_; }
  int count(int identity) const;

  bool operator==(const Gallery& o) const { return records_ == o.records_; }

 private:
  std::vector<FaceRecord> records_;
  std::map<int, int> id_counts_;
};

using QuerySet = Gallery;

struct SynthConfig {
  int n_identities = 20;
  int records_per_identity = 10;
  int queries_per_identity = 1;
  double occluded_fraction = 0.5;
  double sigma = 0.7;  ///< intra-class patch noise (std-dev)
  std::uint64_t seed = 0;
  Occlusion occlusion_kind = Occlusion::Mask;
  int grid = kDefaultGrid;
  int dim = kDefaultDim;
  /// Std-dev of an identity's deviation from the shared face template.
  double identity_spread = 0.3;
  double occluder_scale = 1.0;
};

void validate(const SynthConfig& cfg);

struct SyntheticSet {
  Gallery gallery;
  QuerySet queries;
};

/// Deterministic occluded-identity generator. Patch i of identity k is
/// template_i + spread * N(0, 1) (stream seeded by (seed, k)); every record
/// adds N(0, sigma^2) noise; image_vec is the mean patch row. Occluded
/// queries have their covered rows replaced by a shared occluder pattern.
/// All values are rounded to f32 so the on-disk format is lossless.
SyntheticSet generate_synthetic(const SynthConfig& cfg);

/// The identity-independent occluder pattern (grid^2 x D) for a given kind.
Matrix occluder_pattern(Occlusion kind, int grid, int dim, double scale = 1.0);

/// Replaces the covered rows of `r` with the occluder pattern and recomputes
/// image_vec as the mean patch row.
FaceRecord apply_occlusion(const FaceRecord& r, Occlusion kind, double scale = 1.0);

/// Mean of the patch rows (1 x D).
Matrix mean_patch(const Matrix& patches);

// "FVEB" binary format, little-endian:
//   magic "FVEB", u16 version, u32 count, then per record
//   u32 identity, u8 occlusion, D f32 image_vec, P*D f32 patches.
// Version 1 implies D = 512, P = 64. Version 2 (written only for other
// shapes) inserts u16 grid, u16 dim after the count.
void save_gallery(const Gallery& g, const std::filesystem::path& path);
Gallery load_gallery(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_gallery(const Gallery& g);
Gallery decode_gallery(const std::vector<std::uint8_t>& bytes);

/// Debug text export: one line per record, "identity,occlusion,values...".
void export_gallery_text(const Gallery& g, const std::filesystem::path& path);

}  // namespace fvit
