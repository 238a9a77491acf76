#pragma once

// Point-cloud filtering, robust plane fitting and the planar-canonical frame.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "demslam/sim3.hpp"

namespace demslam {

using Point3 = Eigen::Vector3d;

struct PointCloud {
  std::vector<Point3> points;
  /// Empty, or one value in [0,1] per point.
  std::vector<float> confidence;
  /// Empty, or the index of the frame (within its submap) each point came from.
  std::vector<std::uint32_t> source_frame;

  [[nodiscard]] std::size_t size() const noexcept { return points.size(); }
  [[nodiscard]] bool empty() const noexcept { return points.empty(); }
  [[nodiscard]] bool has_confidence() const noexcept { return !confidence.empty(); }
  [[nodiscard]] bool has_source_frame() const noexcept { return !source_frame.empty(); }

  /// Throws FormatError on non-finite coordinates or mismatched attribute lengths.
  void validate() const;

  /// Subset in input order, attributes filtered in lockstep.
  [[nodiscard]] PointCloud select(std::span<const std::uint8_t> keep) const;
};

/// Plane n . p + d = 0 with unit n. Sign: n_z > 0 when n_z != 0, else n_y > 0,
/// else n_x > 0.
struct PlaneModel {
  Eigen::Vector3d normal{0.0, 0.0, 1.0};
  double offset{0.0};

  [[nodiscard]] double signed_distance(const Point3& p) const { return normal.dot(p) + offset; }
};

/// Columns of rotation are the canonical x, y, z axes in world coordinates;
/// z is the plane normal and origin the inlier centroid.
struct CanonicalFrame {
  Eigen::Matrix3d rotation{Eigen::Matrix3d::Identity()};
  Eigen::Vector3d origin{Eigen::Vector3d::Zero()};
};

struct Frame {
  double timestamp{0.0};
  Sim3 pose;  // world <- camera
};

struct Submap {
  std::int64_t id{0};
  std::vector<Frame> frames;
  PointCloud cloud;  // world frame
  std::optional<std::size_t> transition_frame;

  /// world <- submap, taken as the pose of the first frame.
  [[nodiscard]] const Sim3& pose() const { return frames.front().pose; }
};

/// Keeps points with d_min <= |p| <= d_max. Throws InvalidBounds unless
/// 0 <= d_min < d_max.
PointCloud depth_filter(const PointCloud& cloud, double d_min, double d_max);

/// Same bound, measured from the camera center of each point's source frame.
/// Requires source_frame tags.
PointCloud depth_filter_by_source(const PointCloud& cloud,
                                  std::span<const Point3> camera_centers, double d_min,
                                  double d_max);

struct RansacParams {
  int iterations{500};
  double inlier_thresh{0.05};
  std::uint64_t seed{0};
  /// Score hypotheses by summed confidence and weight the SVD refit.
  bool confidence_weighted{false};
};

struct PlaneFit {
  PlaneModel plane;
  std::vector<std::uint8_t> inlier_mask;
  std::size_t inlier_count{0};
  /// Inliers of the winning triple hypothesis, before the SVD refit.
  std::size_t consensus_count{0};
};

PlaneFit fit_plane_ransac(const PointCloud& cloud, const RansacParams& params);

PlaneModel refine_plane_svd(const PointCloud& inliers, bool confidence_weighted = false);

CanonicalFrame build_canonical_frame(const PlaneModel& plane, const PointCloud& inliers);

/// (u, v, h) = R^T (p - o).
Eigen::Vector3d to_plane_coords(const CanonicalFrame& frame, const Point3& p);
Point3 from_plane_coords(const CanonicalFrame& frame, const Eigen::Vector3d& uvh);

}  // namespace demslam
