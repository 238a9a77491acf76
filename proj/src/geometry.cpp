#include "demslam/geometry.hpp"

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "demslam/error.hpp"
#include "demslam/random.hpp"

namespace demslam {
namespace {

PlaneModel with_fixed_sign(Eigen::Vector3d n, double d) {
  const double norm = n.norm();
  n /= norm;
  d /= norm;
  double key = n.z();
  if (key == 0.0) key = n.y();
  if (key == 0.0) key = n.x();
  if (key < 0.0) {
    n = -n;
    d = -d;
  }
  return {n, d};
}

void check_bounds(double d_min, double d_max) {
  if (!(d_min >= 0.0) || !(d_min < d_max)) {
    throw Error(ErrorCode::InvalidBounds, "depth bounds require 0 <= d_min < d_max");
  }
}

// Largest / middle eigenvalue ratio test on the scatter of the points.
bool is_collinear(const Eigen::Matrix3d& scatter) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(scatter);
  const Eigen::Vector3d ev = es.eigenvalues();  // ascending
  return !(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2);
}

}  // namespace

void PointCloud::validate() const {
  if (!confidence.empty() && confidence.size() != points.size()) {
    throw Error(ErrorCode::FormatError, "confidence count does not match point count");
  }
  if (!source_frame.empty() && source_frame.size() != points.size()) {
    throw Error(ErrorCode::FormatError, "source frame count does not match point count");
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw Error(ErrorCode::FormatError, "non-finite coordinate at point " + std::to_string(i));
    }
  }
}

PointCloud PointCloud::select(std::span<const std::uint8_t> keep) const {
  PointCloud out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!keep[i]) continue;
    out.points.push_back(points[i]);
    if (has_confidence()) out.confidence.push_back(confidence[i]);
    if (has_source_frame()) out.source_frame.push_back(source_frame[i]);
  }
  return out;
}

PointCloud depth_filter(const PointCloud& cloud, double d_min, double d_max) {
  check_bounds(d_min, d_max);
  std::vector<std::uint8_t> keep(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double r = cloud.points[i].norm();
    keep[i] = d_min <= r && r <= d_max;
  }
  return cloud.select(keep);
}

PointCloud depth_filter_by_source(const PointCloud& cloud,
                                  std::span<const Point3> camera_centers, double d_min,
                                  double d_max) {
  check_bounds(d_min, d_max);
  if (!cloud.empty() && !cloud.has_source_frame()) {
    throw Error(ErrorCode::FormatError, "camera-relative depth filter needs source frame tags");
  }
  std::vector<std::uint8_t> keep(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto f = cloud.source_frame[i];
    if (f >= camera_centers.size()) {
      throw Error(ErrorCode::FormatError, "source frame tag " + std::to_string(f) + " out of range");
    }
    const double r = (cloud.points[i] - camera_centers[f]).norm();
    keep[i] = d_min <= r && r <= d_max;
  }
  return cloud.select(keep);
}

PlaneModel refine_plane_svd(const PointCloud& inliers, bool confidence_weighted) {
  if (inliers.size() < 3) {
    throw Error(ErrorCode::DegenerateInput, "plane refit needs at least 3 points");
  }
  const bool weighted = confidence_weighted && inliers.has_confidence();
  const auto w_at = [&](std::size_t i) {
    return weighted ? static_cast<double>(inliers.confidence[i]) : 1.0;
  };
  double wsum = 0.0;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < inliers.size(); ++i) {
    wsum += w_at(i);
    centroid += w_at(i) * inliers.points[i];
  }
  if (!(wsum > 0.0)) throw Error(ErrorCode::DegenerateInput, "zero total confidence");
  centroid /= wsum;

  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < inliers.size(); ++i) {
    const Eigen::Vector3d q = inliers.points[i] - centroid;
    scatter += w_at(i) * q * q.transpose();
  }
  if (is_collinear(scatter)) {
    throw Error(ErrorCode::DegenerateInput, "plane refit on collinear points");
  }
  // Right singular vectors of the centered point matrix are the singular
  // vectors of its scatter matrix.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(scatter, Eigen::ComputeFullV);
  const Eigen::Vector3d n = svd.matrixV().col(2);
  return with_fixed_sign(n, -n.dot(centroid));
}

PlaneFit fit_plane_ransac(const PointCloud& cloud, const RansacParams& params) {
  const std::size_t n_pts = cloud.size();
  if (n_pts < 3) throw Error(ErrorCode::DegenerateInput, "RANSAC needs at least 3 points");

  const bool weighted = params.confidence_weighted && cloud.has_confidence();
  const auto score_of = [&](const Eigen::Vector3d& n, double d, std::size_t* count) {
    double score = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < n_pts; ++i) {
      if (std::abs(n.dot(cloud.points[i]) + d) <= params.inlier_thresh) {
        ++c;
        score += weighted ? cloud.confidence[i] : 1.0;
      }
    }
    *count = c;
    return score;
  };

  double best_score = -1.0;
  std::size_t best_count = 0;
  PlaneModel best;
  for (int it = 0; it < params.iterations; ++it) {
    // Each iteration owns its generator so the sample for iteration k never
    // depends on how earlier iterations were scheduled.
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(it)));
    std::uniform_int_distribution<std::size_t> pick(0, n_pts - 1);
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    std::size_t c = pick(rng);
    while (c == a || c == b) c = pick(rng);

    const Eigen::Vector3d& pa = cloud.points[a];
    const Eigen::Vector3d e1 = cloud.points[b] - pa;
    const Eigen::Vector3d e2 = cloud.points[c] - pa;
    const Eigen::Vector3d cr = e1.cross(e2);
    if (cr.norm() <= 1e-12 * e1.norm() * e2.norm() || cr.norm() == 0.0) continue;
    const PlaneModel hyp = with_fixed_sign(cr, -cr.dot(pa));
    std::size_t count = 0;
    const double score = score_of(hyp.normal, hyp.offset, &count);
    if (score > best_score) {
      best_score = score;
      best_count = count;
      best = hyp;
    }
  }

  if (best_score < 0.0) {
    throw Error(ErrorCode::DegenerateInput, "no non-collinear triple found");
  }

  std::vector<std::uint8_t> consensus(n_pts);
  for (std::size_t i = 0; i < n_pts; ++i) {
    consensus[i] = std::abs(best.signed_distance(cloud.points[i])) <= params.inlier_thresh;
  }

  PlaneFit fit;
  fit.consensus_count = best_count;
  fit.plane = refine_plane_svd(cloud.select(consensus), weighted);
  fit.inlier_mask.resize(n_pts);
  for (std::size_t i = 0; i < n_pts; ++i) {
    fit.inlier_mask[i] =
        std::abs(fit.plane.signed_distance(cloud.points[i])) <= params.inlier_thresh;
    fit.inlier_count += fit.inlier_mask[i];
  }
  return fit;
}

CanonicalFrame build_canonical_frame(const PlaneModel& plane, const PointCloud& inliers) {
  if (inliers.size() < 2) {
    throw Error(ErrorCode::DegenerateInput, "canonical frame needs at least 2 inliers");
  }
  const Eigen::Vector3d z = plane.normal.normalized();
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : inliers.points) centroid += p;
  centroid /= static_cast<double>(inliers.size());

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : inliers.points) {
    Eigen::Vector3d q = p - centroid;
    q -= z.dot(q) * z;
    cov += q * q.transpose();
  }
  cov /= static_cast<double>(inliers.size());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (!(es.eigenvalues()(2) > 1e-24)) {
    throw Error(ErrorCode::DegenerateInput, "inliers have no in-plane spread");
  }
  Eigen::Vector3d x = es.eigenvectors().col(2);
  x -= z.dot(x) * z;
  x.normalize();
  double key = x.x();
  if (std::abs(key) < 1e-12) key = x.y();
  if (std::abs(key) < 1e-12) key = x.z();
  if (key < 0.0) x = -x;
  const Eigen::Vector3d y = z.cross(x);

  CanonicalFrame frame;
  frame.rotation.col(0) = x;
  frame.rotation.col(1) = y;
  frame.rotation.col(2) = z;
  frame.origin = centroid;
  return frame;
}

Eigen::Vector3d to_plane_coords(const CanonicalFrame& frame, const Point3& p) {
  return frame.rotation.transpose() * (p - frame.origin);
}

Point3 from_plane_coords(const CanonicalFrame& frame, const Eigen::Vector3d& uvh) {
  return frame.rotation * uvh + frame.origin;
}

}  // namespace demslam
