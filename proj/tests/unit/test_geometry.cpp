#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "common.hpp"
#include "demslam/error.hpp"
#include "demslam/geometry.hpp"

using namespace demslam;

namespace {

PointCloud noisy_plane(Rng& rng, const Eigen::Vector3d& n, double d, std::size_t inliers,
                       std::size_t outliers, double sigma) {
  const Eigen::Vector3d nn = n.normalized();
  const Eigen::Vector3d a = nn.unitOrthogonal();
  const Eigen::Vector3d b = nn.cross(a);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::normal_distribution<double> g(0.0, sigma);
  PointCloud c;
  for (std::size_t k = 0; k < inliers; ++k) c.points.push_back(-d * nn + u(rng) * a + u(rng) * b + g(rng) * nn);
  for (std::size_t k = 0; k < outliers; ++k) c.points.push_back(Eigen::Vector3d(u(rng), u(rng), u(rng)));
  return c;
}

double angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

}  // namespace

TEST_CASE("depth filter") {
  SUBCASE("far point removed") {
    PointCloud c;
    c.points = {{50, 0, 0}, {5, 0, 0}};
    const auto out = depth_filter(c, 0.1, 30.0);
    REQUIRE(out.size() == 1);
    CHECK(out.points[0].x() == 5.0);
  }
  SUBCASE("no-op when everything is in range") {
    Rng rng(1);
    PointCloud c;
    for (int k = 0; k < 100; ++k) {
      Eigen::Vector3d p = testutil::random_vec(rng);
      c.points.push_back(p.normalized() * (1.0 + 9.0 * std::abs(p.x())));
    }
    CHECK(depth_filter(c, 0.1, 30.0).points == c.points);
  }
  SUBCASE("matches a brute-force scan, order preserved, with attributes in lockstep") {
    Rng rng(2);
    std::uniform_real_distribution<double> r(0.0, 60.0);
    PointCloud c;
    for (int k = 0; k < 1000; ++k) {
      Eigen::Vector3d dir = testutil::random_vec(rng);
      while (dir.norm() < 1e-3) dir = testutil::random_vec(rng);
      c.points.push_back(dir.normalized() * r(rng));
      c.confidence.push_back(static_cast<float>(k) / 1000.0f);
    }
    const auto out = depth_filter(c, 1.0, 30.0);
    std::vector<Eigen::Vector3d> expect;
    std::vector<float> expect_conf;
    std::size_t rejected = 0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double n = c.points[k].norm();
      if (n >= 1.0 && n <= 30.0) {
        expect.push_back(c.points[k]);
        expect_conf.push_back(c.confidence[k]);
      } else {
        ++rejected;
      }
    }
    CHECK(out.points == expect);
    CHECK(out.confidence == expect_conf);
    CHECK(out.size() + rejected == c.size());
  }
  SUBCASE("bad bounds") {
    CHECK_THROWS_AS(depth_filter(PointCloud{}, 5.0, 1.0), Error);
  }
  SUBCASE("per-frame variant measures from each source camera") {
    PointCloud c;
    c.points = {{10, 0, 0}, {10, 0, 0}};
    c.source_frame = {0, 1};
    const std::vector<Point3> centers{{0, 0, 0}, {9, 0, 0}};
    const auto out = depth_filter_by_source(c, centers, 0.1, 5.0);
    REQUIRE(out.size() == 1);
    CHECK(out.source_frame[0] == 1u);
  }
}

TEST_CASE("RANSAC plane fit") {
  SUBCASE("exact plane z = 0") {
    Rng rng(3);
    PointCloud c;
    std::uniform_real_distribution<double> u(-2, 2);
    for (int k = 0; k < 100; ++k) c.points.push_back({u(rng), u(rng), 0.0});
    const auto fit = fit_plane_ransac(c, {});
    CHECK((fit.plane.normal - Eigen::Vector3d::UnitZ()).norm() < 1e-9);
    CHECK(std::abs(fit.plane.offset) < 1e-9);
    CHECK(fit.inlier_count == 100);
  }
  SUBCASE("noisy tilted plane with 30% outliers") {
    Rng rng(4);
    // x + y + z = 3  <=>  n = (1,1,1)/sqrt3, d = -sqrt3
    const Eigen::Vector3d n = Eigen::Vector3d::Ones().normalized();
    const auto c = noisy_plane(rng, n, -std::sqrt(3.0), 140, 60, 0.01);
    RansacParams p;
    p.seed = 9;
    const auto fit = fit_plane_ransac(c, p);
    CHECK(angle_deg(fit.plane.normal, n) < 1.0);
    CHECK(std::abs(fit.plane.offset + std::sqrt(3.0)) < 0.02);
    // Inliers end up within the threshold of the fitted plane.
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (fit.inlier_mask[k]) CHECK(std::abs(fit.plane.signed_distance(c.points[k])) <= p.inlier_thresh + 1e-9);
    }
  }
  SUBCASE("two points are degenerate") {
    PointCloud c;
    c.points = {{0, 0, 0}, {1, 0, 0}};
    CHECK_THROWS_AS(fit_plane_ransac(c, {}), Error);
  }
  SUBCASE("deterministic for a fixed seed; inliers grow with the threshold") {
    Rng rng(5);
    const auto c = noisy_plane(rng, {0.2, -0.1, 1.0}, 0.5, 150, 50, 0.02);
    RansacParams p;
    p.seed = 77;
    const auto a = fit_plane_ransac(c, p);
    const auto b = fit_plane_ransac(c, p);
    CHECK(a.inlier_mask == b.inlier_mask);
    CHECK(a.plane.normal == b.plane.normal);
    std::size_t prev = 0;
    for (double t : {0.01, 0.02, 0.05, 0.1, 0.5}) {
      p.inlier_thresh = t;
      const auto f = fit_plane_ransac(c, p);
      CHECK(f.consensus_count >= prev);
      prev = f.consensus_count;
    }
  }
  SUBCASE("rigid motion moves the plane covariantly") {
    Rng rng(6);
    const auto c = noisy_plane(rng, {0.3, 0.1, 1.0}, 1.0, 80, 0, 0.0);
    const auto Q = testutil::random_sim3(rng, 1.0);
    PointCloud moved;
    for (const auto& p : c.points) moved.points.push_back(Q.rotation() * p + Q.translation());
    const auto a = fit_plane_ransac(c, {});
    const auto b = fit_plane_ransac(moved, {});
    const Eigen::Vector3d expect = Q.rotation() * a.plane.normal;
    CHECK(std::min((b.plane.normal - expect).norm(), (b.plane.normal + expect).norm()) < 1e-6);
  }
}

TEST_CASE("SVD plane refit") {
  SUBCASE("unit square at z = 2") {
    PointCloud c;
    c.points = {{0, 0, 2}, {1, 0, 2}, {1, 1, 2}, {0, 1, 2}};
    const auto p = refine_plane_svd(c);
    CHECK((p.normal - Eigen::Vector3d::UnitZ()).norm() < 1e-12);
    CHECK(p.offset == doctest::Approx(-2.0));
  }
  SUBCASE("collinear points are degenerate") {
    PointCloud c;
    c.points = {{0, 0, 0}, {1, 1, 0}, {2, 2, 0}};
    CHECK_THROWS_AS(refine_plane_svd(c), Error);
  }
  SUBCASE("residual no worse than any triple hypothesis") {
    Rng rng(7);
    const auto c = noisy_plane(rng, {0.1, 0.2, 1.0}, 0.3, 12, 0, 0.02);
    const auto rms = [&](const PlaneModel& m) {
      double s = 0.0;
      for (const auto& p : c.points) s += std::pow(m.signed_distance(p), 2);
      return std::sqrt(s / static_cast<double>(c.size()));
    };
    const double best = rms(refine_plane_svd(c));
    for (std::size_t a = 0; a < c.size(); ++a) {
      for (std::size_t b = a + 1; b < c.size(); ++b) {
        for (std::size_t d = b + 1; d < c.size(); ++d) {
          const Eigen::Vector3d n = (c.points[b] - c.points[a]).cross(c.points[d] - c.points[a]);
          if (n.norm() < 1e-9) continue;
          PlaneModel m;
          m.normal = n.normalized();
          m.offset = -m.normal.dot(c.points[a]);
          CHECK(best <= rms(m) + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("canonical frame") {
  Rng rng(8);
  // Regular 20 x 10 lattice, long along x: the in-plane covariance is diagonal.
  PointCloud c;
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 10; ++j) c.points.push_back({i - 9.5 + 3.0, 0.2 * (j - 4.5) - 2.0, 0.0});
  }
  const auto fit = fit_plane_ransac(c, {});
  const auto frame = build_canonical_frame(fit.plane, c);

  SUBCASE("aligned cloud gives identity axes and the centroid") {
    CHECK((frame.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& p : c.points) centroid += p;
    CHECK((frame.origin - centroid / 200.0).norm() < 1e-12);
    CHECK(to_plane_coords(frame, frame.origin).norm() < 1e-12);
  }
  SUBCASE("frame invariants and covariance under rotation") {
    const auto Q = testutil::random_sim3(rng, 2.0);
    PointCloud moved;
    for (const auto& p : c.points) moved.points.push_back(Q.rotation() * p);
    const auto mf = fit_plane_ransac(moved, {});
    const auto f2 = build_canonical_frame(mf.plane, moved);
    CHECK((f2.rotation.transpose() * f2.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(f2.rotation.determinant() == doctest::Approx(1.0));
    CHECK((f2.rotation.col(2) - mf.plane.normal).norm() < 1e-12);
    const Eigen::Matrix3d QR = Q.rotation_matrix() * frame.rotation;
    for (int k = 0; k < 3; ++k) CHECK(std::abs(std::abs(f2.rotation.col(k).dot(QR.col(k))) - 1.0) < 1e-6);
    // Plane inliers sit within the threshold in canonical height.
    for (std::size_t k = 0; k < moved.size(); ++k) {
      if (mf.inlier_mask[k]) CHECK(std::abs(to_plane_coords(f2, moved.points[k]).z()) <= 0.05);
    }
  }
  SUBCASE("isotropic spread is still deterministic") {
    PointCloud ring;
    for (int k = 0; k < 64; ++k) {
      const double a = 2 * std::numbers::pi * k / 64.0;
      ring.points.push_back({std::cos(a), std::sin(a), 0.0});
    }
    PlaneModel up;
    const auto a = build_canonical_frame(up, ring);
    const auto b = build_canonical_frame(up, ring);
    CHECK(a.rotation == b.rotation);
    CHECK(a.rotation.col(0).x() >= 0.0);
  }
  SUBCASE("identity frame and round trip") {
    const CanonicalFrame id;
    CHECK((to_plane_coords(id, {1, 2, 3}) - Eigen::Vector3d(1, 2, 3)).norm() == 0.0);
    for (int k = 0; k < 100; ++k) {
      CanonicalFrame f;
      f.rotation = testutil::random_sim3(rng).rotation_matrix();
      f.origin = testutil::random_vec(rng, -50, 50);
      const Eigen::Vector3d p = testutil::random_vec(rng, -50, 50);
      CHECK((from_plane_coords(f, to_plane_coords(f, p)) - p).norm() < 1e-12);
    }
  }
}

TEST_CASE("point cloud validation") {
  PointCloud c;
  c.points = {{0, 0, 0}};
  c.confidence = {0.5f, 0.5f};
  CHECK_THROWS_AS(c.validate(), Error);
  c.confidence.clear();
  c.points.push_back({std::nan(""), 0, 0});
  CHECK_THROWS_AS(c.validate(), Error);
}
