#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "common.hpp"
#include "demslam/error.hpp"
#include "demslam/sim3.hpp"

using namespace demslam;

namespace {

void check_close(const Sim3& a, const Sim3& b, double tol) {
  CHECK((a.matrix() - b.matrix()).cwiseAbs().maxCoeff() <= tol);
}

}  // namespace

TEST_CASE("exp and log of the identity") {
  CHECK(sim3_log(Sim3()).isZero(0.0));
  check_close(sim3_exp(Tangent7::Zero()), Sim3(), 0.0);
}

TEST_CASE("pure scale logs to sigma = ln s") {
  const Sim3 T(Eigen::Quaterniond::Identity(), Eigen::Vector3d::Zero(), std::numbers::e);
  Tangent7 expect = Tangent7::Zero();
  expect(6) = 1.0;
  CHECK((sim3_log(T) - expect).norm() < 1e-12);
}

TEST_CASE("exp/log round trip on seeded transforms") {
  Rng rng(derive_seed(11, "roundtrip"));
  for (int n = 0; n < 2000; ++n) {
    const Sim3 T = testutil::random_sim3(rng, std::numbers::pi - 1e-3);
    check_close(sim3_exp(sim3_log(T)), T, 1e-9);
  }
}

TEST_CASE("small-angle and zero-sigma branches stay accurate") {
  for (double a : {0.0, 1e-12, 1e-8, 1e-5, 1e-3}) {
    for (double sigma : {0.0, 1e-10, 1e-6, 0.3}) {
      Tangent7 xi;
      xi << 0.3, -1.2, 2.0, a, -0.5 * a, 0.25 * a, sigma;
      CHECK((sim3_log(sim3_exp(xi)) - xi).norm() < 1e-9);
    }
  }
}

TEST_CASE("log at a half turn is a branch singularity") {
  const Sim3 T(Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitZ())),
               Eigen::Vector3d::Zero(), 1.0);
  CHECK_THROWS_AS(sim3_log(T), Error);
}

TEST_CASE("compose, inverse and act") {
  Rng rng(5);
  const Sim3 T = testutil::random_sim3(rng);
  check_close(T * T.inverse(), Sim3(), 1e-12);

  const Sim3 S(Eigen::Quaterniond::Identity(), Eigen::Vector3d::Zero(), 2.0);
  CHECK((sim3_act(S, Eigen::Vector3d(1, 1, 1)) - Eigen::Vector3d(2, 2, 2)).norm() == 0.0);

  for (int n = 0; n < 100; ++n) {
    const Sim3 A = testutil::random_sim3(rng);
    const Sim3 B = testutil::random_sim3(rng);
    const Eigen::Vector3d p = testutil::random_vec(rng, -10, 10);
    CHECK(((A * B) * p - A * (B * p)).norm() < 1e-9);
  }
}

TEST_CASE("adjoint moves tangents through a transform") {
  Rng rng(6);
  for (int n = 0; n < 50; ++n) {
    const Sim3 T = testutil::random_sim3(rng, 2.0);
    Tangent7 xi;
    xi << testutil::random_vec(rng), testutil::random_vec(rng) * 0.5, 0.2;
    check_close(T * sim3_exp(xi) * T.inverse(), sim3_exp(T.adjoint() * xi), 1e-9);
  }
}

TEST_CASE("right Jacobian matches a first-order perturbation") {
  Rng rng(7);
  for (int n = 0; n < 20; ++n) {
    Tangent7 xi;
    xi << testutil::random_vec(rng), testutil::random_vec(rng), 0.3;
    Tangent7 d;
    d << testutil::random_vec(rng), testutil::random_vec(rng), 0.5;
    d *= 1e-6;
    const Tangent7 lhs = sim3_log(sim3_exp(xi).inverse() * sim3_exp(xi + d));
    CHECK((lhs - sim3_right_jacobian(xi) * d).norm() < 1e-10);
    CHECK((sim3_right_jacobian(xi) * sim3_right_jacobian_inverse(xi) - Matrix7d::Identity()).norm() < 1e-9);
  }
}

TEST_CASE("estimate_relative_sim3 on exact data") {
  Rng rng(8);
  std::vector<Eigen::Vector3d> src(10);
  for (auto& p : src) p = testutil::random_vec(rng, -3, 3);

  SUBCASE("dst = src gives identity") {
    check_close(estimate_relative_sim3(src, src), Sim3(), 1e-12);
  }
  SUBCASE("known scale, rotation and translation are recovered") {
    const Sim3 T(Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ())),
                 Eigen::Vector3d(1, 0, 0), 2.0);
    std::vector<Eigen::Vector3d> dst;
    for (const auto& p : src) dst.push_back(T * p);
    const Sim3 est = estimate_relative_sim3(src, dst);
    check_close(est, T, 1e-9);
    // Estimating the reverse direction yields the inverse.
    check_close(estimate_relative_sim3(dst, src), est.inverse(), 1e-9);
    CHECK(alignment_rms(est, src, dst) < 1e-9);
  }
  SUBCASE("collinear points are degenerate") {
    const std::vector<Eigen::Vector3d> line{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
    CHECK_THROWS_AS(estimate_relative_sim3(line, line), Error);
  }
  SUBCASE("rigid mode keeps unit scale") {
    std::vector<Eigen::Vector3d> dst;
    for (const auto& p : src) dst.push_back(1.5 * p);
    CHECK(estimate_relative_sim3(src, dst, {}, false).scale() == doctest::Approx(1.0));
  }
}
