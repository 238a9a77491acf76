#include <doctest.h>

#include <numbers>

#include "common.hpp"
#include "demslam/error.hpp"
#include "demslam/eval.hpp"
#include "demslam/posegraph.hpp"
#include "demslam/synthetic.hpp"

using namespace demslam;

TEST_CASE("edge residual") {
  Rng rng(21);
  const Sim3 Ti = testutil::random_sim3(rng);
  const Sim3 Tj = testutil::random_sim3(rng);

  SUBCASE("consistent measurement gives zero") {
    CHECK(edge_residual(Ti, Tj, Ti.inverse() * Tj).norm() < 1e-9);
  }
  SUBCASE("right perturbation of the measurement shows up at its size") {
    Tangent7 d;
    d << testutil::random_vec(rng), testutil::random_vec(rng), 0.4;
    d *= 1e-6 / d.norm();
    const double r = edge_residual(Ti, Tj, Ti.inverse() * Tj * sim3_exp(d)).norm();
    CHECK(r == doctest::Approx(1e-6).epsilon(0.01));
  }
  SUBCASE("pure translation measurement between identity poses") {
    const Sim3 T(Eigen::Quaterniond::Identity(), Eigen::Vector3d(1, 0, 0), 1.0);
    const Tangent7 r = edge_residual(Sim3(), Sim3(), T);
    CHECK((r.head<3>() - Eigen::Vector3d(1, 0, 0)).norm() < 1e-12);
    CHECK(r.tail<4>().norm() < 1e-12);
  }
}

TEST_CASE("analytic Jacobians match central differences") {
  Rng rng(22);
  const double h = 1e-6;
  for (int n = 0; n < 100; ++n) {
    const Sim3 Ti = testutil::random_sim3(rng, 2.5);
    const Sim3 Tj = testutil::random_sim3(rng, 2.5);
    // Measurements near consistency keep the residual inside the log's branch.
    Tangent7 noise;
    noise << testutil::random_vec(rng) * 0.3, testutil::random_vec(rng) * 0.3, 0.1;
    const Sim3 That = Ti.inverse() * Tj * sim3_exp(noise);
    const EdgeJacobians J = edge_jacobians(Ti, Tj, That);
    Matrix7d Ni;
    Matrix7d Nj;
    for (int k = 0; k < 7; ++k) {
      Tangent7 e = Tangent7::Zero();
      e(k) = h;
      Ni.col(k) = (edge_residual(Ti * sim3_exp(e), Tj, That) - edge_residual(Ti * sim3_exp(-e), Tj, That)) / (2 * h);
      Nj.col(k) = (edge_residual(Ti, Tj * sim3_exp(e), That) - edge_residual(Ti, Tj * sim3_exp(-e), That)) / (2 * h);
    }
    CHECK((J.d_i - Ni).norm() <= 1e-5 * std::max(1.0, Ni.norm()));
    CHECK((J.d_j - Nj).norm() <= 1e-5 * std::max(1.0, Nj.norm()));
  }
}

TEST_CASE("residuals are invariant to a common world transform") {
  Rng rng(23);
  for (int n = 0; n < 20; ++n) {
    const Sim3 G = testutil::random_sim3(rng);
    const Sim3 Ti = testutil::random_sim3(rng);
    const Sim3 Tj = testutil::random_sim3(rng);
    Tangent7 noise;
    noise << testutil::random_vec(rng) * 0.2, testutil::random_vec(rng) * 0.2, 0.05;
    const Sim3 That = Ti.inverse() * Tj * sim3_exp(noise);
    CHECK((edge_residual(G * Ti, G * Tj, That) - edge_residual(Ti, Tj, That)).norm() < 1e-9);
  }
}

TEST_CASE("edge information") {
  const InformationParams p{};
  SUBCASE("floored at epsilon for a zero rerank score") {
    const Matrix7d I = edge_information(0.0, 0.0, 0.1, p);
    const double expect = p.kappa * p.epsilon / (0.01 + p.epsilon * p.epsilon);
    CHECK(I(0, 0) == doctest::Approx(expect));
    CHECK((I - expect * Matrix7d::Identity()).norm() < 1e-9);
  }
  SUBCASE("linear in the rerank score") {
    CHECK(edge_information(0, 1.0, 0.1, p)(3, 3) / edge_information(0, 0.5, 0.1, p)(3, 3) ==
          doctest::Approx(2.0));
  }
  SUBCASE("monotone decreasing in the alignment rms") {
    double prev = edge_information(0, 0.7, 0.0, p)(0, 0);
    for (double rms : {0.01, 0.05, 0.1, 0.5, 2.0}) {
      const double cur = edge_information(0, 0.7, rms, p)(0, 0);
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("noise-free chain is left untouched") {
  PoseGraph g;
  Rng rng(24);
  for (PoseId k = 0; k < 6; ++k) g.poses[k] = testutil::random_sim3(rng, 1.0);
  for (PoseId k = 0; k + 1 < 6; ++k) {
    g.edges.push_back({k, k + 1, EdgeType::Odometry, g.poses[k].inverse() * g.poses[k + 1], Matrix7d::Identity()});
  }
  const auto res = optimize_pose_graph(g);
  CHECK(res.report.iterations == 1);
  CHECK(res.report.final_cost < 1e-20);
  for (const auto& [id, T] : g.poses) {
    CHECK((res.poses.at(id).matrix() - T.matrix()).norm() < 1e-12);
  }
}

TEST_CASE("circle loop closure shrinks the drift") {
  const auto fx = make_circle_fixture(20, 10.0, 0.05, 0.5 * std::numbers::pi / 180.0, 0.005, 3);
  OptimizerParams params;
  const auto res = optimize_pose_graph(fx.graph, params);
  const Trajectory truth = poses_to_trajectory(fx.truth);
  const double pre = evaluate_ate(poses_to_trajectory(fx.graph.poses), truth).rmse;
  const double post = evaluate_ate(poses_to_trajectory(res.poses), truth).rmse;
  CHECK(pre > 0.0);
  CHECK(post < pre);
  CHECK(res.report.converged);
  CHECK(res.report.iterations <= 15);
  // Cost never increases across accepted iterations.
  for (std::size_t k = 1; k < res.report.history.size(); ++k) {
    CHECK(res.report.history[k].cost <= res.report.history[k - 1].cost);
  }
  CHECK(res.poses.at(fx.graph.anchor).matrix() == fx.graph.poses.at(fx.graph.anchor).matrix());
}

TEST_CASE("consistent measurements pull drifted poses back to the truth") {
  // Same circle, but every edge now carries the true relative pose: only
  // the initial estimates drift, so the optimum is the ground truth itself.
  auto fx = make_circle_fixture(20, 10.0, 0.05, 0.5 * std::numbers::pi / 180.0, 0.005, 4);
  for (auto& e : fx.graph.edges) e.measurement = fx.truth.at(e.i).inverse() * fx.truth.at(e.j);
  for (const auto& [id, T] : fx.truth) {
    if (id != fx.graph.anchor) continue;
    const Sim3 fix = T * fx.graph.poses.at(id).inverse();
    for (auto& [k, P] : fx.graph.poses) P = fix * P;
  }
  const auto res = optimize_pose_graph(fx.graph);
  const Trajectory truth = poses_to_trajectory(fx.truth);
  const double pre = evaluate_ate(poses_to_trajectory(fx.graph.poses), truth).rmse;
  const double post = evaluate_ate(poses_to_trajectory(res.poses), truth).rmse;
  CHECK(pre > 0.1);
  CHECK(post < 1e-6);
  CHECK(res.report.iterations <= 15);
}

TEST_CASE("sparse and dense solvers agree") {
  const auto fx = make_circle_fixture(30, 10.0, 0.05, 0.01, 0.005, 4);
  OptimizerParams dense;
  OptimizerParams sparse;
  sparse.dense_threshold = 1;
  const auto a = optimize_pose_graph(fx.graph, dense);
  const auto b = optimize_pose_graph(fx.graph, sparse);
  CHECK_FALSE(a.report.sparse_solver);
  CHECK(b.report.sparse_solver);
  for (const auto& [id, T] : a.poses) CHECK((b.poses.at(id).matrix() - T.matrix()).norm() < 1e-6);
}

TEST_CASE("unreachable pose is rejected") {
  PoseGraph g;
  g.poses[0] = Sim3();
  g.poses[1] = Sim3();
  g.poses[2] = Sim3();
  g.edges.push_back({0, 1, EdgeType::Odometry, Sim3(), Matrix7d::Identity()});
  CHECK_THROWS_AS(optimize_pose_graph(g), Error);
  try {
    optimize_pose_graph(g);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DisconnectedGraph);
  }
}

TEST_CASE("pose graph JSON round trip") {
  const auto fx = make_circle_fixture(8, 5.0, 0.05, 0.01, 0.005, 5);
  const auto dir = testutil::temp_dir("posegraph");
  save_pose_graph(dir / "g.json", fx.graph);
  const PoseGraph back = load_pose_graph(dir / "g.json");
  CHECK(back.anchor == fx.graph.anchor);
  REQUIRE(back.edges.size() == fx.graph.edges.size());
  for (std::size_t k = 0; k < back.edges.size(); ++k) {
    CHECK(back.edges[k].type == fx.graph.edges[k].type);
    CHECK((back.edges[k].measurement.matrix() - fx.graph.edges[k].measurement.matrix()).norm() < 1e-12);
    CHECK((back.edges[k].information - fx.graph.edges[k].information).norm() < 1e-9);
  }
}
