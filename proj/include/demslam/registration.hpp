#pragma once

// Point-to-point similarity ICP used to verify and refine loop edges.

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "demslam/geometry.hpp"

namespace demslam {

/// Uniform voxel bucketing for fixed-radius nearest-neighbor queries; the
/// radius must not exceed the voxel side.
class VoxelHash {
 public:
  VoxelHash(std::span<const Point3> points, double voxel);

  struct Match {
    std::size_t index{0};
    double dist2{0.0};
  };
  /// Closest stored point within max_dist (<= voxel side), lowest index on ties.
  [[nodiscard]] std::optional<Match> nearest(const Point3& p, double max_dist) const;
  [[nodiscard]] double voxel() const noexcept { return voxel_; }

 private:
  [[nodiscard]] std::uint64_t key(std::int64_t x, std::int64_t y, std::int64_t z) const;

  std::span<const Point3> points_;
  double voxel_;
  std::vector<std::uint32_t> order_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, std::uint32_t>> cells_;
};

/// Every ceil(n / max_points)-th point, in input order.
std::vector<Point3> stride_subsample(std::span<const Point3> points, std::size_t max_points);

struct IcpParams {
  int iterations{30};
  /// Correspondence gate shrinks geometrically from start to end.
  double max_dist_start{2.0};
  double max_dist_end{0.3};
  bool with_scale{true};
};

struct IcpResult {
  Sim3 transform;  // dst <- src
  double rms{0.0};
  /// Fraction of source points matched within max_dist_end.
  double overlap{0.0};
  int iterations{0};
};

/// Aligns src onto dst from `init`. Throws DegenerateInput when fewer than
/// three correspondences survive at any stage.
IcpResult icp_align(std::span<const Point3> src, std::span<const Point3> dst, const Sim3& init,
                    const IcpParams& params = {});

}  // namespace demslam
