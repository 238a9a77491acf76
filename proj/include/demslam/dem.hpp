#pragma once

// Tiled 2.5D height rasters in the planar-canonical frame and their
// grayscale renderings.

#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "demslam/geometry.hpp"

namespace demslam {

/// In-memory EMPTY marker for raster cells. Serialized forms use an explicit
/// validity channel instead.
inline constexpr double kEmpty = std::numeric_limits<double>::quiet_NaN();
inline bool is_empty(double v) noexcept { return v != v; }

enum class ReducerKind { Mean, Max, Softmax };

struct Reducer {
  ReducerKind kind{ReducerKind::Softmax};
  double tau{0.02};
};

std::string to_string(ReducerKind kind);
ReducerKind parse_reducer(const std::string& name);

struct DemParams {
  int target_px_long{4096};
  int tile_px{256};
  Reducer reducer{};
  double p_lo{0.5};
  double p_hi{99.5};
  double alpha_edge{0.95};

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

struct Bounds {
  double u0{0}, u1{0}, v0{0}, v1{0};
  auto operator<=>(const Bounds&) const = default;
};

struct TileIndex {
  std::int32_t u{0};
  std::int32_t v{0};
  auto operator<=>(const TileIndex&) const = default;
};

struct PixelBin {
  TileIndex tile;
  int x{0};
  int y{0};
};

/// tile_px x tile_px cells stored row-major (index y * tile_px + x).
struct DemTile {
  TileIndex index;
  std::vector<double> height;
  std::vector<std::uint32_t> hits;
};

/// Sparse tiled raster of doubles; missing tiles and EMPTY cells read as kEmpty.
struct TiledRaster {
  int tile_px{1};
  int tiles_u{0};
  int tiles_v{0};
  std::map<TileIndex, std::vector<double>> tiles;

  [[nodiscard]] int width() const { return tiles_u * tile_px; }
  [[nodiscard]] int height() const { return tiles_v * tile_px; }
  [[nodiscard]] double at(int gx, int gy) const;
  /// Every non-empty cell value, in tile then row-major order.
  [[nodiscard]] std::vector<double> values() const;
};

class DemGrid {
 public:
  double mpp{1.0};
  Bounds bounds;
  int width_px{0};
  int height_px{0};
  int tile_px{1};
  CanonicalFrame frame;
  std::map<TileIndex, DemTile> tiles;
  /// Points skipped by rasterize because they fell outside the bounds.
  std::size_t rejected_points{0};

  [[nodiscard]] int tiles_u() const { return (width_px + tile_px - 1) / tile_px; }
  [[nodiscard]] int tiles_v() const { return (height_px + tile_px - 1) / tile_px; }
  [[nodiscard]] double height_at(int gx, int gy) const;
  [[nodiscard]] TiledRaster height_raster() const;
  /// Planar (u, v) of the center of a global pixel.
  [[nodiscard]] Eigen::Vector2d pixel_center_uv(double gx, double gy) const;
};

Bounds compute_bounds(std::span<const Eigen::Vector3d> points_uvh);

/// S / target_px_long with S the longer planar span. Throws ZeroExtent.
double compute_mpp(const Bounds& bounds, int target_px_long);

/// Grid size in pixels along u and v for the given resolution.
std::pair<int, int> grid_size_px(const Bounds& bounds, double mpp);

PixelBin bin_point(double u, double v, const Bounds& bounds, double mpp, int tile_px);

/// Throws EmptyInput on an empty bucket, InvalidTemperature on tau <= 0.
double reduce_heights(std::span<const double> heights, const Reducer& reducer);

DemGrid rasterize(std::span<const Eigen::Vector3d> points_uvh, const DemParams& params,
                  const Bounds& bounds, double mpp, const CanonicalFrame& frame = {});

/// Linear interpolation between order statistics; p in [0, 100].
double percentile(std::vector<double> values, double p);

struct HeightRange {
  double h_min{0};
  double h_max{0};
};

/// Global percentiles over the non-empty cells of one or more grids.
HeightRange height_percentiles(std::span<const DemGrid* const> grids, double p_lo, double p_hi);

/// (clip(H, h_min, h_max) - h_min) / (h_max - h_min); zero when h_min == h_max.
TiledRaster normalize_heights(const DemGrid& grid, const HeightRange& range);

TiledRaster normalize_grid(const DemGrid& grid, double p_lo, double p_hi);

/// 3x3 Sobel gradient magnitude; EMPTY or out-of-raster neighbors take the
/// center value.
TiledRaster sobel_magnitude(const TiledRaster& raster);

/// I0 * (1 - alpha * clip(|grad I0| / perc99(|grad I0|), 0, 1)).
TiledRaster edge_enhance(const TiledRaster& intensity, double alpha_edge);

/// max(0, n_surf . light) with normals from mpp-scaled central differences.
TiledRaster hillshade(const DemGrid& grid, const Eigen::Vector3d& light_dir);

}  // namespace demslam
