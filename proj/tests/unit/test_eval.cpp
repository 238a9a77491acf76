#include <doctest.h>

#include <numbers>

#include "common.hpp"
#include "demslam/error.hpp"
#include "demslam/eval.hpp"

using namespace demslam;

namespace {

Trajectory line_trajectory(int n, double dt = 1.0) {
  Trajectory t;
  for (int k = 0; k < n; ++k) {
    const double a = 0.4 * k;
    t.push_back({k * dt, Sim3(Eigen::Quaterniond(Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ())),
                              Eigen::Vector3d(std::cos(a) * 5, std::sin(a) * 3, 0.1 * k), 1.0)});
  }
  return t;
}

}  // namespace

TEST_CASE("association") {
  const Trajectory gt = line_trajectory(5);
  SUBCASE("identical stamps pair fully") {
    const auto p = associate(gt, gt, 0.02);
    REQUIRE(p.size() == 5);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(p[k].est == k);
      CHECK(p[k].gt == k);
    }
  }
  SUBCASE("offset beyond max_dt") {
    Trajectory est = gt;
    for (auto& s : est) s.timestamp += 0.02 + 1e-6;
    CHECK_THROWS_AS(associate(est, gt, 0.02), Error);
  }
  SUBCASE("interleaved stamps use greedy closest-first matching") {
    // gt at 0, 1, 2; est at 0.4, 0.45, 1.9. Pairs within 0.6: e0-g0 0.4,
    // e0-g1 0.6, e1-g0 0.45, e1-g1 0.55, e2-g2 0.1. Closest first: e2-g2,
    // e0-g0, then e1-g1 since g0 is taken.
    Trajectory g3;
    Trajectory e3;
    for (double t : {0.0, 1.0, 2.0}) g3.push_back({t, Sim3()});
    for (double t : {0.4, 0.45, 1.9}) e3.push_back({t, Sim3()});
    const auto p = associate(e3, g3, 0.6);
    REQUIRE(p.size() == 3);
    CHECK(p[0].gt == 0);
    CHECK(p[1].gt == 1);
    CHECK(p[2].gt == 2);
  }
}

TEST_CASE("Umeyama alignment") {
  std::vector<Eigen::Vector3d> gt{{0, 0, 0}, {1, 0, 0}, {0, 2, 0}, {0, 0, 3}, {1, 1, 1}};
  SUBCASE("identity") {
    const Sim3 a = umeyama_align(gt, gt);
    CHECK((a.matrix() - Eigen::Matrix4d::Identity()).norm() < 1e-12);
  }
  SUBCASE("pure shift") {
    std::vector<Eigen::Vector3d> est;
    for (const auto& p : gt) est.push_back(p - Eigen::Vector3d(1, 0, 0));
    CHECK((umeyama_align(est, gt).translation() - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);
  }
  SUBCASE("scaled and rotated copy") {
    const Eigen::Matrix3d R = Eigen::AngleAxisd(std::numbers::pi / 6, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    std::vector<Eigen::Vector3d> est;
    for (const auto& p : gt) est.push_back(0.5 * R * p);
    const Sim3 a = umeyama_align(est, gt, true);
    CHECK(a.scale() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((a.rotation_matrix() - R.transpose()).norm() < 1e-9);
    for (std::size_t k = 0; k < gt.size(); ++k) CHECK((a * est[k] - gt[k]).norm() < 1e-9);
  }
}

TEST_CASE("ATE") {
  SUBCASE("hand case: one of four pairs off by 1 m") {
    std::vector<PosePair> pairs(4);
    for (std::size_t k = 0; k < 4; ++k) {
      pairs[k] = {k, k, Eigen::Vector3d(double(k), 0, 0), Eigen::Vector3d(double(k), 0, 0)};
    }
    pairs[2].est_position.y() = 1.0;
    CHECK(ate_rmse(pairs, Sim3()) == 0.5);
  }
  SUBCASE("identical trajectories") {
    const Trajectory t = line_trajectory(10);
    CHECK(evaluate_ate(t, t).rmse < 1e-12);
    CHECK(evaluate_ate(t, t, false).rmse < 1e-12);
  }
  SUBCASE("constant offset vanishes under rigid alignment") {
    const Trajectory gt = line_trajectory(10);
    Trajectory est = gt;
    for (auto& s : est) s.pose = Sim3(Eigen::Quaterniond::Identity(), Eigen::Vector3d(3, -2, 1), 1.0) * s.pose;
    CHECK(evaluate_ate(est, gt, false).rmse < 1e-9);
  }
  SUBCASE("alignment never hurts; common rigid motion changes nothing") {
    Rng rng(4);
    const Trajectory gt = line_trajectory(12);
    Trajectory est = gt;
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& s : est) {
      s.pose = Sim3(s.pose.rotation(), s.pose.translation() + Eigen::Vector3d(n(rng), n(rng), n(rng)), 1.0);
    }
    const auto pairs = associate(est, gt);
    const AteResult r = evaluate_ate(est, gt, true);
    CHECK(r.rmse >= 0.0);
    CHECK(r.rmse <= ate_rmse(pairs, Sim3()) + 1e-12);
    const Sim3 G(Eigen::Quaterniond(Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized())),
                 Eigen::Vector3d(10, -4, 2), 1.0);
    Trajectory est2 = est;
    Trajectory gt2 = gt;
    for (auto& s : est2) s.pose = G * s.pose;
    for (auto& s : gt2) s.pose = G * s.pose;
    CHECK(evaluate_ate(est2, gt2, true).rmse == doctest::Approx(r.rmse).epsilon(1e-9));
  }
}

TEST_CASE("trajectory files") {
  const auto dir = testutil::temp_dir("traj");
  const Trajectory t = line_trajectory(6, 0.1);
  write_tum(dir / "a.tum", t);
  const Trajectory back = read_tum(dir / "a.tum");
  REQUIRE(back.size() == t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    CHECK(back[k].timestamp == doctest::Approx(t[k].timestamp));
    CHECK((back[k].pose.matrix() - t[k].pose.matrix()).norm() < 1e-9);
  }
  Trajectory scaled = t;
  scaled[2].pose = Sim3(scaled[2].pose.rotation(), scaled[2].pose.translation(), 1.7);
  write_kitti(dir / "a.txt", scaled);
  const Trajectory k = read_kitti(dir / "a.txt", 0.1);
  REQUIRE(k.size() == t.size());
  CHECK(k[2].pose.scale() == doctest::Approx(1.7));
  CHECK((k[2].pose.matrix() - scaled[2].pose.matrix()).norm() < 1e-9);
  CHECK(k[3].timestamp == doctest::Approx(0.3));
}
