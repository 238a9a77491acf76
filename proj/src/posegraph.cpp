#include "demslam/posegraph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <set>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>
#include <json.hpp>

#include "demslam/error.hpp"

namespace demslam {
namespace {

// Huber weight and cost for a squared whitened error s.
double robust_cost(double s, double delta) {
  if (delta <= 0.0 || s <= delta * delta) return s;
  return 2.0 * delta * std::sqrt(s) - delta * delta;
}

double robust_weight(double s, double delta) {
  if (delta <= 0.0 || s <= delta * delta) return 1.0;
  return delta / std::sqrt(s);
}

void check_connected(const PoseGraph& graph) {
  if (!graph.poses.contains(graph.anchor)) {
    throw Error(ErrorCode::DisconnectedGraph, "anchor " + std::to_string(graph.anchor) +
                                                  " has no pose");
  }
  std::map<PoseId, std::vector<PoseId>> adj;
  for (const auto& e : graph.edges) {
    if (!graph.poses.contains(e.i) || !graph.poses.contains(e.j)) {
      throw Error(ErrorCode::DisconnectedGraph, "edge " + std::to_string(e.i) + "-" +
                                                    std::to_string(e.j) +
                                                    " references a missing pose");
    }
    adj[e.i].push_back(e.j);
    adj[e.j].push_back(e.i);
  }
  std::set<PoseId> seen{graph.anchor};
  std::deque<PoseId> queue{graph.anchor};
  while (!queue.empty()) {
    const PoseId p = queue.front();
    queue.pop_front();
    for (PoseId q : adj[p]) {
      if (seen.insert(q).second) queue.push_back(q);
    }
  }
  for (const auto& [id, pose] : graph.poses) {
    if (!seen.contains(id)) {
      throw Error(ErrorCode::DisconnectedGraph,
                  "pose " + std::to_string(id) + " is unreachable from the anchor");
    }
  }
}

nlohmann::ordered_json sim3_to_json(const Sim3& T) {
  const auto& q = T.rotation();
  const auto& t = T.translation();
  return {{"q", {q.w(), q.x(), q.y(), q.z()}}, {"t", {t.x(), t.y(), t.z()}}, {"s", T.scale()}};
}

Sim3 sim3_from_json(const nlohmann::json& j) {
  const auto& q = j.at("q");
  const auto& t = j.at("t");
  Eigen::Quaterniond quat(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                          q.at(3).get<double>());
  return {quat, {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()},
          j.at("s").get<double>()};
}

}  // namespace

Tangent7 edge_residual(const Sim3& T_i, const Sim3& T_j, const Sim3& T_hat) {
  return sim3_log(T_j.inverse() * T_i * T_hat);
}

EdgeJacobians edge_jacobians(const Sim3& T_i, const Sim3& T_j, const Sim3& T_hat) {
  const Sim3 E = T_j.inverse() * T_i * T_hat;
  const Matrix7d Jinv = sim3_right_jacobian_inverse(sim3_log(E));
  return {Jinv * T_hat.inverse().adjoint(), -Jinv * E.inverse().adjoint()};
}

Matrix7d edge_information(double /*vote_score*/, double rerank_score, double alignment_rms,
                          const InformationParams& params) {
  const double eps = params.epsilon;
  const double w = std::clamp(rerank_score, eps, 1.0);
  return params.kappa * w / (alignment_rms * alignment_rms + eps * eps) * Matrix7d::Identity();
}

Matrix7d odometry_information(double sigma_t, double sigma_phi_rad, double sigma_scale) {
  if (!(sigma_t > 0.0) || !(sigma_phi_rad > 0.0) || !(sigma_scale > 0.0)) {
    throw Error(ErrorCode::InvalidSigma, "odometry sigmas must be positive");
  }
  Vector7d d;
  d << Eigen::Vector3d::Constant(1.0 / (sigma_t * sigma_t)),
      Eigen::Vector3d::Constant(1.0 / (sigma_phi_rad * sigma_phi_rad)),
      1.0 / (sigma_scale * sigma_scale);
  return d.asDiagonal();
}

double graph_cost(const PoseGraph& graph, const std::map<PoseId, Sim3>& poses,
                  double huber_delta) {
  double cost = 0.0;
  for (const auto& e : graph.edges) {
    const Tangent7 r = edge_residual(poses.at(e.i), poses.at(e.j), e.measurement);
    const double s = r.dot(e.information * r);
    cost += e.type == EdgeType::Loop ? robust_cost(s, huber_delta) : s;
  }
  return cost;
}

OptimizeResult optimize_pose_graph(const PoseGraph& graph, const OptimizerParams& params) {
  check_connected(graph);
  OptimizeResult result{graph.poses, {}};
  auto& report = result.report;
  auto& poses = result.poses;

  // Variable blocks for every pose except the anchor.
  std::map<PoseId, int> block;
  for (const auto& [id, pose] : poses) {
    if (id != graph.anchor) block.emplace(id, static_cast<int>(block.size()));
  }
  const int n = 7 * static_cast<int>(block.size());
  report.sparse_solver = static_cast<int>(block.size()) >= params.dense_threshold;
  double cost = graph_cost(graph, poses, params.huber_delta);
  report.initial_cost = cost;
  report.final_cost = cost;
  if (n == 0 || graph.edges.empty()) {
    report.converged = true;
    return result;
  }

  for (int iter = 1; iter <= params.max_iters; ++iter) {
    Eigen::MatrixXd H_dense;
    std::vector<Eigen::Triplet<double>> triplets;
    if (report.sparse_solver) {
      triplets.reserve(graph.edges.size() * 4 * 49);
    } else {
      H_dense = Eigen::MatrixXd::Zero(n, n);
    }
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);

    const auto add_block = [&](int r, int c, const Matrix7d& m) {
      if (report.sparse_solver) {
        for (int a = 0; a < 7; ++a)
          for (int k = 0; k < 7; ++k) triplets.emplace_back(r + a, c + k, m(a, k));
      } else {
        H_dense.block<7, 7>(r, c) += m;
      }
    };

    for (const auto& e : graph.edges) {
      const Sim3& Ti = poses.at(e.i);
      const Sim3& Tj = poses.at(e.j);
      const Tangent7 r = edge_residual(Ti, Tj, e.measurement);
      const auto J = edge_jacobians(Ti, Tj, e.measurement);
      double w = 1.0;
      if (e.type == EdgeType::Loop) w = robust_weight(r.dot(e.information * r), params.huber_delta);
      const Matrix7d W = w * e.information;
      const auto bi = block.find(e.i);
      const auto bj = block.find(e.j);
      if (bi != block.end()) {
        const int oi = 7 * bi->second;
        add_block(oi, oi, J.d_i.transpose() * W * J.d_i);
        b.segment<7>(oi) -= J.d_i.transpose() * W * r;
        if (bj != block.end()) {
          const int oj = 7 * bj->second;
          const Matrix7d cross = J.d_i.transpose() * W * J.d_j;
          add_block(oi, oj, cross);
          add_block(oj, oi, cross.transpose());
        }
      }
      if (bj != block.end()) {
        const int oj = 7 * bj->second;
        add_block(oj, oj, J.d_j.transpose() * W * J.d_j);
        b.segment<7>(oj) -= J.d_j.transpose() * W * r;
      }
    }

    Eigen::VectorXd delta;
    if (report.sparse_solver) {
      Eigen::SparseMatrix<double> H(n, n);
      H.setFromTriplets(triplets.begin(), triplets.end());
      Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(H);
      if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::SingularSystem, "sparse Cholesky failed");
      }
      delta = llt.solve(b);
    } else {
      Eigen::LLT<Eigen::MatrixXd> llt(H_dense);
      if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::SingularSystem, "dense Cholesky failed");
      }
      delta = llt.solve(b);
    }
    if (!delta.allFinite()) throw Error(ErrorCode::SingularSystem, "non-finite update");

    // Step halving until the cost does not increase.
    double scale = 1.0;
    std::map<PoseId, Sim3> trial;
    double trial_cost = cost;
    bool accepted = false;
    for (int h = 0; h <= params.max_halvings; ++h, scale *= 0.5) {
      trial = poses;
      for (const auto& [id, k] : block) {
        trial[id] = poses.at(id) * sim3_exp(scale * delta.segment<7>(7 * k));
      }
      trial_cost = graph_cost(graph, trial, params.huber_delta);
      if (trial_cost <= cost) {
        accepted = true;
        break;
      }
    }
    const double max_step = accepted ? scale * delta.lpNorm<Eigen::Infinity>() : 0.0;
    if (accepted) {
      poses = std::move(trial);
      cost = trial_cost;
    }
    report.history.push_back({iter, cost, max_step});
    report.iterations = iter;
    if (!accepted || max_step < params.tol) {
      report.converged = accepted;
      break;
    }
  }
  report.final_cost = cost;
  return result;
}

void save_pose_graph(const std::filesystem::path& path, const PoseGraph& graph) {
  nlohmann::ordered_json j;
  j["anchor"] = graph.anchor;
  j["poses"] = nlohmann::ordered_json::array();
  for (const auto& [id, T] : graph.poses) {
    auto p = sim3_to_json(T);
    p["id"] = id;
    j["poses"].push_back(std::move(p));
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : graph.edges) {
    std::vector<double> info(e.information.data(), e.information.data() + 49);
    j["edges"].push_back({{"i", e.i},
                          {"j", e.j},
                          {"type", e.type == EdgeType::Loop ? "loop" : "odom"},
                          {"T_hat", sim3_to_json(e.measurement)},
                          {"info", info}});
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

PoseGraph load_pose_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  PoseGraph g;
  try {
    const auto j = nlohmann::json::parse(in);
    g.anchor = j.at("anchor").get<PoseId>();
    for (const auto& p : j.at("poses")) g.poses[p.at("id").get<PoseId>()] = sim3_from_json(p);
    for (const auto& e : j.at("edges")) {
      PoseEdge edge;
      edge.i = e.at("i").get<PoseId>();
      edge.j = e.at("j").get<PoseId>();
      const auto type = e.at("type").get<std::string>();
      if (type != "odom" && type != "loop") throw Error(ErrorCode::FormatError, "edge type " + type);
      edge.type = type == "loop" ? EdgeType::Loop : EdgeType::Odometry;
      edge.measurement = sim3_from_json(e.at("T_hat"));
      const auto info = e.at("info").get<std::vector<double>>();
      if (info.size() == 7) {
        edge.information = Vector7d(Eigen::Map<const Vector7d>(info.data())).asDiagonal();
      } else if (info.size() == 49) {
        edge.information = Eigen::Map<const Matrix7d>(info.data());
      } else {
        throw Error(ErrorCode::FormatError, "info must have 7 or 49 entries");
      }
      g.edges.push_back(edge);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + ex.what());
  }
  return g;
}

void write_optimizer_report(const std::filesystem::path& path, const OptimizerReport& report) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "iter,cost,max_step\n" << std::setprecision(17);
  out << 0 << ',' << report.initial_cost << ',' << 0 << '\n';
  for (const auto& s : report.history) out << s.iter << ',' << s.cost << ',' << s.max_step << '\n';
}

void PoseStore::publish(std::map<PoseId, Sim3> poses) {
  auto next = std::make_shared<const std::map<PoseId, Sim3>>(std::move(poses));
  std::lock_guard lock(mutex_);
  current_ = std::move(next);
}

PoseStore::Snapshot PoseStore::snapshot() const {
  std::lock_guard lock(mutex_);
  return current_;
}

}  // namespace demslam
