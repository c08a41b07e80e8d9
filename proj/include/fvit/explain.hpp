#pragma once

// Cross-correlation heatmaps: each patch of one image dotted with the
// average-pooled feature of the other image.

#include <filesystem>

#include "fvit/embedding_store.hpp"
#include "fvit/nn_core.hpp"

namespace fvit {

struct Heatmap {
  Matrix raw;         // grid x grid
  Matrix normalized;  // min-max scaled to [0, 1]; constant maps become zeros
};

struct HeatmapPair {
  Heatmap a_to_b;  // patches of a against mean(b)
  Heatmap b_to_a;  // patches of b against mean(a)
};

/// DimensionError unless both records share a square patch grid and width.
HeatmapPair cc_heatmap(const FaceRecord& a, const FaceRecord& b);

Matrix normalize_map(const Matrix& raw);

void write_heatmap_csv(const Matrix& map, const std::filesystem::path& path);
/// Binary 8-bit grayscale PGM ("P5"), nearest-neighbor upscaled to side x side.
void write_heatmap_pgm(const Matrix& normalized, const std::filesystem::path& path, int side = 256);
/// Raw transport plan for external plotting.
void write_flow_csv(const Matrix& flow, const std::filesystem::path& path);

}  // namespace fvit
