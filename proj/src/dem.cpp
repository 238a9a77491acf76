#include "demslam/dem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "demslam/error.hpp"

namespace demslam {
namespace {

// Tile values plus a one-pixel border fetched from neighboring tiles.
// EMPTY border cells stay EMPTY.
class PaddedTile {
 public:
  PaddedTile(const TiledRaster& raster, TileIndex idx, const std::vector<double>& data)
      : n_(raster.tile_px), stride_(raster.tile_px + 2), buf_(stride_ * stride_, kEmpty) {
    for (int y = 0; y < n_; ++y) {
      std::copy_n(data.begin() + y * n_, n_, buf_.begin() + (y + 1) * stride_ + 1);
    }
    const int ox = idx.u * n_;
    const int oy = idx.v * n_;
    for (int k = -1; k <= n_; ++k) {
      set(k, -1, raster.at(ox + k, oy - 1));
      set(k, n_, raster.at(ox + k, oy + n_));
      set(-1, k, raster.at(ox - 1, oy + k));
      set(n_, k, raster.at(ox + n_, oy + k));
    }
  }

  [[nodiscard]] double operator()(int x, int y) const { return buf_[(y + 1) * stride_ + x + 1]; }

 private:
  void set(int x, int y, double v) { buf_[(y + 1) * stride_ + x + 1] = v; }

  int n_;
  int stride_;
  std::vector<double> buf_;
};

double padded_or(const PaddedTile& t, int x, int y, double fallback) {
  const double v = t(x, y);
  return is_empty(v) ? fallback : v;
}

// Derivative along one axis from the two neighbors; one-sided when one is
// EMPTY, zero when both are.
double axis_derivative(double lo, double center, double hi) {
  const bool has_lo = !is_empty(lo);
  const bool has_hi = !is_empty(hi);
  if (has_lo && has_hi) return 0.5 * (hi - lo);
  if (has_hi) return hi - center;
  if (has_lo) return center - lo;
  return 0.0;
}

}  // namespace

std::string to_string(ReducerKind kind) {
  switch (kind) {
    case ReducerKind::Mean: return "mean";
    case ReducerKind::Max: return "max";
    case ReducerKind::Softmax: return "softmax";
  }
  return "unknown";
}

ReducerKind parse_reducer(const std::string& name) {
  if (name == "mean") return ReducerKind::Mean;
  if (name == "max") return ReducerKind::Max;
  if (name == "softmax") return ReducerKind::Softmax;
  throw Error(ErrorCode::ConfigError, "unknown reducer '" + name + "'");
}

void DemParams::validate() const {
  if (tile_px < 1 || target_px_long < tile_px) {
    throw Error(ErrorCode::ConfigError, "DEM params require target_px_long >= tile_px >= 1");
  }
  if (!(0.0 <= p_lo && p_lo < p_hi && p_hi <= 100.0)) {
    throw Error(ErrorCode::ConfigError, "DEM params require 0 <= p_lo < p_hi <= 100");
  }
  if (reducer.kind == ReducerKind::Softmax && !(reducer.tau > 0.0)) {
    throw Error(ErrorCode::ConfigError, "softmax temperature must be positive");
  }
  if (!(alpha_edge >= 0.0 && alpha_edge <= 1.0)) {
    throw Error(ErrorCode::ConfigError, "alpha_edge must lie in [0, 1]");
  }
}

double TiledRaster::at(int gx, int gy) const {
  if (gx < 0 || gy < 0) return kEmpty;
  const TileIndex idx{gx / tile_px, gy / tile_px};
  const auto it = tiles.find(idx);
  if (it == tiles.end()) return kEmpty;
  return it->second[(gy % tile_px) * tile_px + gx % tile_px];
}

std::vector<double> TiledRaster::values() const {
  std::vector<double> out;
  for (const auto& [idx, data] : tiles) {
    for (double v : data) {
      if (!is_empty(v)) out.push_back(v);
    }
  }
  return out;
}

double DemGrid::height_at(int gx, int gy) const {
  if (gx < 0 || gy < 0) return kEmpty;
  const auto it = tiles.find({gx / tile_px, gy / tile_px});
  if (it == tiles.end()) return kEmpty;
  return it->second.height[(gy % tile_px) * tile_px + gx % tile_px];
}

TiledRaster DemGrid::height_raster() const {
  TiledRaster r{tile_px, tiles_u(), tiles_v(), {}};
  for (const auto& [idx, tile] : tiles) r.tiles.emplace(idx, tile.height);
  return r;
}

Eigen::Vector2d DemGrid::pixel_center_uv(double gx, double gy) const {
  return {bounds.u0 + gx * mpp, bounds.v0 + gy * mpp};
}

Bounds compute_bounds(std::span<const Eigen::Vector3d> points_uvh) {
  if (points_uvh.empty()) throw Error(ErrorCode::EmptyInput, "bounds of an empty point set");
  Bounds b{points_uvh[0].x(), points_uvh[0].x(), points_uvh[0].y(), points_uvh[0].y()};
  for (const auto& p : points_uvh) {
    b.u0 = std::min(b.u0, p.x());
    b.u1 = std::max(b.u1, p.x());
    b.v0 = std::min(b.v0, p.y());
    b.v1 = std::max(b.v1, p.y());
  }
  return b;
}

double compute_mpp(const Bounds& bounds, int target_px_long) {
  const double span = std::max(bounds.u1 - bounds.u0, bounds.v1 - bounds.v0);
  if (!(span > 0.0)) throw Error(ErrorCode::ZeroExtent, "planar bounds have zero extent");
  if (target_px_long < 1) throw Error(ErrorCode::ConfigError, "target_px_long must be >= 1");
  return span / target_px_long;
}

std::pair<int, int> grid_size_px(const Bounds& bounds, double mpp) {
  const auto cells = [mpp](double extent) {
    const double x = extent / mpp;
    // Absorb rounding in S / (S / target) so an exact span does not gain a pixel.
    return std::max(1, static_cast<int>(std::ceil(x - 1e-9 * std::max(1.0, x))));
  };
  return {cells(bounds.u1 - bounds.u0), cells(bounds.v1 - bounds.v0)};
}

PixelBin bin_point(double u, double v, const Bounds& bounds, double mpp, int tile_px) {
  if (!(u >= bounds.u0 && u <= bounds.u1 && v >= bounds.v0 && v <= bounds.v1)) {
    throw Error(ErrorCode::OutOfBounds, "point outside raster bounds");
  }
  const auto [w_px, h_px] = grid_size_px(bounds, mpp);
  const int n_u = (w_px + tile_px - 1) / tile_px;
  const int n_v = (h_px + tile_px - 1) / tile_px;
  const double xh = (u - bounds.u0) / mpp;
  const double yh = (v - bounds.v0) / mpp;
  const int iu = std::clamp(static_cast<int>(std::floor(xh / tile_px)), 0, n_u - 1);
  const int iv = std::clamp(static_cast<int>(std::floor(yh / tile_px)), 0, n_v - 1);
  // Clip to the tile and, in the last tile, to the last pixel of the grid.
  const int x = std::clamp(static_cast<int>(std::round(xh - static_cast<double>(iu) * tile_px)),
                           0, std::min(tile_px, w_px - iu * tile_px) - 1);
  const int y = std::clamp(static_cast<int>(std::round(yh - static_cast<double>(iv) * tile_px)),
                           0, std::min(tile_px, h_px - iv * tile_px) - 1);
  return {{iu, iv}, x, y};
}

double reduce_heights(std::span<const double> heights, const Reducer& reducer) {
  if (heights.empty()) throw Error(ErrorCode::EmptyInput, "reducing an empty bucket");
  double sum = 0.0;
  double hmin = heights[0];
  double hmax = heights[0];
  for (double h : heights) {
    sum += h;
    hmin = std::min(hmin, h);
    hmax = std::max(hmax, h);
  }
  // Rounding can push sum / K a hair outside [min, max] for equal heights.
  const double mean = std::clamp(sum / static_cast<double>(heights.size()), hmin, hmax);
  switch (reducer.kind) {
    case ReducerKind::Mean: return mean;
    case ReducerKind::Max: return hmax;
    case ReducerKind::Softmax: {
      if (!(reducer.tau > 0.0)) {
        throw Error(ErrorCode::InvalidTemperature, "softmax temperature must be positive");
      }
      double wsum = 0.0;
      double whsum = 0.0;
      for (double h : heights) {
        const double w = std::exp((h - hmax) / reducer.tau);
        wsum += w;
        whsum += w * h;
      }
      // The exact value lies in [mean, max]; clamping only removes rounding.
      return std::clamp(whsum / wsum, mean, hmax);
    }
  }
  return mean;
}

DemGrid rasterize(std::span<const Eigen::Vector3d> points_uvh, const DemParams& params,
                  const Bounds& bounds, double mpp, const CanonicalFrame& frame) {
  if (params.tile_px < 1) throw Error(ErrorCode::ConfigError, "tile_px must be >= 1");
  DemGrid grid;
  grid.mpp = mpp;
  grid.bounds = bounds;
  std::tie(grid.width_px, grid.height_px) = grid_size_px(bounds, mpp);
  grid.tile_px = params.tile_px;
  grid.frame = frame;

  struct Entry {
    TileIndex tile;
    int pixel;
    std::size_t point;
  };
  std::vector<Entry> entries;
  entries.reserve(points_uvh.size());
  for (std::size_t i = 0; i < points_uvh.size(); ++i) {
    const auto& p = points_uvh[i];
    if (!(p.x() >= bounds.u0 && p.x() <= bounds.u1 && p.y() >= bounds.v0 && p.y() <= bounds.v1)) {
      ++grid.rejected_points;
      continue;
    }
    const PixelBin bin = bin_point(p.x(), p.y(), bounds, mpp, params.tile_px);
    entries.push_back({bin.tile, bin.y * params.tile_px + bin.x, i});
  }
  // Input order within a bucket is kept so reductions are bit-reproducible.
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.tile != b.tile) return a.tile < b.tile;
    return a.pixel < b.pixel;
  });

  const std::size_t cells = static_cast<std::size_t>(params.tile_px) * params.tile_px;
  std::vector<double> bucket;
  for (std::size_t k = 0; k < entries.size();) {
    std::size_t end = k;
    bucket.clear();
    while (end < entries.size() && entries[end].tile == entries[k].tile &&
           entries[end].pixel == entries[k].pixel) {
      bucket.push_back(points_uvh[entries[end].point].z());
      ++end;
    }
    auto [it, inserted] = grid.tiles.try_emplace(entries[k].tile);
    DemTile& tile = it->second;
    if (inserted) {
      tile.index = entries[k].tile;
      tile.height.assign(cells, kEmpty);
      tile.hits.assign(cells, 0);
    }
    tile.height[entries[k].pixel] = reduce_heights(bucket, params.reducer);
    tile.hits[entries[k].pixel] = static_cast<std::uint32_t>(bucket.size());
    k = end;
  }
  return grid;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "percentile of an empty set");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

HeightRange height_percentiles(std::span<const DemGrid* const> grids, double p_lo, double p_hi) {
  std::vector<double> all;
  for (const DemGrid* g : grids) {
    for (const auto& [idx, tile] : g->tiles) {
      for (double h : tile.height) {
        if (!is_empty(h)) all.push_back(h);
      }
    }
  }
  if (all.empty()) throw Error(ErrorCode::EmptyGrid, "grid has no observed cells");
  const double lo = percentile(all, p_lo);
  const double hi = percentile(std::move(all), p_hi);
  return {lo, hi};
}

TiledRaster normalize_heights(const DemGrid& grid, const HeightRange& range) {
  TiledRaster out{grid.tile_px, grid.tiles_u(), grid.tiles_v(), {}};
  const double span = range.h_max - range.h_min;
  for (const auto& [idx, tile] : grid.tiles) {
    std::vector<double> data(tile.height.size(), kEmpty);
    for (std::size_t c = 0; c < data.size(); ++c) {
      const double h = tile.height[c];
      if (is_empty(h)) continue;
      data[c] = span > 0.0 ? (std::clamp(h, range.h_min, range.h_max) - range.h_min) / span : 0.0;
    }
    out.tiles.emplace(idx, std::move(data));
  }
  return out;
}

TiledRaster normalize_grid(const DemGrid& grid, double p_lo, double p_hi) {
  const DemGrid* one[] = {&grid};
  return normalize_heights(grid, height_percentiles(one, p_lo, p_hi));
}

TiledRaster sobel_magnitude(const TiledRaster& raster) {
  TiledRaster out{raster.tile_px, raster.tiles_u, raster.tiles_v, {}};
  const int n = raster.tile_px;
  for (const auto& [idx, data] : raster.tiles) {
    const PaddedTile pad(raster, idx, data);
    std::vector<double> mag(data.size(), kEmpty);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double c = pad(x, y);
        if (is_empty(c)) continue;
        double p[3][3];
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) p[dy + 1][dx + 1] = padded_or(pad, x + dx, y + dy, c);
        }
        const double gx = (p[0][2] + 2 * p[1][2] + p[2][2]) - (p[0][0] + 2 * p[1][0] + p[2][0]);
        const double gy = (p[2][0] + 2 * p[2][1] + p[2][2]) - (p[0][0] + 2 * p[0][1] + p[0][2]);
        mag[y * n + x] = std::sqrt(gx * gx + gy * gy);
      }
    }
    out.tiles.emplace(idx, std::move(mag));
  }
  return out;
}

TiledRaster edge_enhance(const TiledRaster& intensity, double alpha_edge) {
  if (alpha_edge == 0.0 || intensity.tiles.empty()) return intensity;
  const TiledRaster grad = sobel_magnitude(intensity);
  const std::vector<double> mags = grad.values();
  const double p99 = mags.empty() ? 0.0 : percentile(mags, 99.0);
  if (!(p99 > 0.0)) return intensity;

  TiledRaster out = intensity;
  for (auto& [idx, data] : out.tiles) {
    const auto& g = grad.tiles.at(idx);
    for (std::size_t c = 0; c < data.size(); ++c) {
      if (is_empty(data[c])) continue;
      const double e = 1.0 - alpha_edge * std::clamp(g[c] / p99, 0.0, 1.0);
      data[c] *= e;
    }
  }
  return out;
}

TiledRaster hillshade(const DemGrid& grid, const Eigen::Vector3d& light_dir) {
  const TiledRaster heights = grid.height_raster();
  TiledRaster out{grid.tile_px, grid.tiles_u(), grid.tiles_v(), {}};
  const int n = grid.tile_px;
  for (const auto& [idx, data] : heights.tiles) {
    const PaddedTile pad(heights, idx, data);
    std::vector<double> shade(data.size(), kEmpty);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double c = pad(x, y);
        if (is_empty(c)) continue;
        const double dzdu = axis_derivative(pad(x - 1, y), c, pad(x + 1, y)) / grid.mpp;
        const double dzdv = axis_derivative(pad(x, y - 1), c, pad(x, y + 1)) / grid.mpp;
        const Eigen::Vector3d normal = Eigen::Vector3d(-dzdu, -dzdv, 1.0).normalized();
        shade[y * n + x] = std::max(0.0, normal.dot(light_dir));
      }
    }
    out.tiles.emplace(idx, std::move(shade));
  }
  return out;
}

}  // namespace demslam
