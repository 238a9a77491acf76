#include "demslam/covis.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <string>

#include <json.hpp>

#include "demslam/error.hpp"

namespace demslam {

std::map<SubmapId, double> vote_submaps(std::span<const TileHit> hits) {
  std::map<SubmapId, double> scores;
  for (const auto& h : hits) scores[submap_of(h.tile_id)] += h.similarity;
  return scores;
}

std::vector<ScoredSubmap> select_covisible(const std::map<SubmapId, double>& scores,
                                           SubmapId query, const SelectParams& params) {
  if (params.top_k < 1) throw Error(ErrorCode::ConfigError, "top-K must be >= 1");
  std::vector<ScoredSubmap> out;
  for (const auto& [id, score] : scores) {
    if (id == query) continue;
    if (id < query && static_cast<std::int64_t>(query) - id <= params.temporal_window) continue;
    if (score >= params.tau_s) out.push_back({id, score});
  }
  std::stable_sort(out.begin(), out.end(), [](const ScoredSubmap& a, const ScoredSubmap& b) {
    return a.score > b.score;
  });
  if (out.size() > static_cast<std::size_t>(params.top_k)) {
    out.resize(static_cast<std::size_t>(params.top_k));
  }
  return out;
}

double rerank_vpr(std::span<const Eigen::VectorXd> query_chips,
                  std::span<const Eigen::VectorXd> candidate_tiles, int k_prime) {
  if (candidate_tiles.empty()) throw Error(ErrorCode::EmptyCandidate, "candidate has no tiles");
  if (k_prime < 1) throw Error(ErrorCode::ConfigError, "k' must be >= 1");
  std::vector<Eigen::VectorXd> tiles;
  tiles.reserve(candidate_tiles.size());
  for (const auto& t : candidate_tiles) {
    const double n = t.norm();
    if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "zero tile descriptor");
    tiles.push_back(t / n);
  }
  const auto keep = std::min(tiles.size(), static_cast<std::size_t>(k_prime));
  double total = 0.0;
  std::vector<double> sims(tiles.size());
  for (const auto& chip : query_chips) {
    const double n = chip.norm();
    if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "zero chip descriptor");
    for (std::size_t t = 0; t < tiles.size(); ++t) sims[t] = tiles[t].dot(chip) / n;
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(keep), sims.end(),
                      std::greater<>());
    for (std::size_t t = 0; t < keep; ++t) total += sims[t];
  }
  return total;
}

std::vector<LoopCandidate> accept_by_rerank(std::vector<LoopCandidate> candidates, double rho) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) best = std::max(best, c.rerank_score);
  for (auto& c : candidates) c.accepted = best > 0.0 && c.rerank_score >= rho * best;
  return candidates;
}

CovisGraph::CovisGraph(const CovisGraph& other) {
  std::lock_guard lock(other.mutex_);
  nodes_ = other.nodes_;
  edges_ = other.edges_;
}

CovisGraph& CovisGraph::operator=(const CovisGraph& other) {
  if (this == &other) return *this;
  std::scoped_lock lock(mutex_, other.mutex_);
  nodes_ = other.nodes_;
  edges_ = other.edges_;
  return *this;
}

void CovisGraph::add_node(SubmapId id) {
  std::lock_guard lock(mutex_);
  const auto it = std::lower_bound(nodes_.begin(), nodes_.end(), id);
  if (it == nodes_.end() || *it != id) nodes_.insert(it, id);
}

void CovisGraph::update(SubmapId query, std::span<const LoopCandidate> accepted) {
  for (const auto& c : accepted) {
    if (c.neighbor == query || c.query != query) {
      throw Error(ErrorCode::SelfEdge, "edge " + std::to_string(c.query) + "-" +
                                           std::to_string(c.neighbor) + " for query " +
                                           std::to_string(query));
    }
  }
  add_node(query);
  for (const auto& c : accepted) {
    add_node(c.neighbor);
    std::lock_guard lock(mutex_);
    const auto key = std::minmax(query, c.neighbor);
    auto [it, fresh] = edges_.try_emplace({key.first, key.second},
                                          CovisEdge{key.first, key.second, c.vote_score,
                                                    c.rerank_score});
    if (!fresh) {
      it->second.vote_score = std::max(it->second.vote_score, c.vote_score);
      it->second.rerank_score = std::max(it->second.rerank_score, c.rerank_score);
    }
  }
}

std::vector<SubmapId> CovisGraph::nodes() const {
  std::lock_guard lock(mutex_);
  return nodes_;
}

std::vector<CovisEdge> CovisGraph::edges() const {
  std::lock_guard lock(mutex_);
  std::vector<CovisEdge> out;
  out.reserve(edges_.size());
  for (const auto& [key, e] : edges_) out.push_back(e);
  return out;
}

void CovisGraph::save_json(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["nodes"] = nodes();
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : edges()) {
    j["edges"].push_back(
        {{"a", e.a}, {"b", e.b}, {"vote_score", e.vote_score}, {"rerank_score", e.rerank_score}});
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

CovisGraph CovisGraph::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  CovisGraph g;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& n : j.at("nodes")) g.add_node(n.get<SubmapId>());
    for (const auto& e : j.at("edges")) {
      LoopCandidate c{e.at("a").get<SubmapId>(), e.at("b").get<SubmapId>(),
                      e.at("vote_score").get<double>(), e.at("rerank_score").get<double>(), true};
      g.update(c.query, std::span<const LoopCandidate>(&c, 1));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + ex.what());
  }
  return g;
}

void write_candidate_log(const std::filesystem::path& path,
                         std::span<const LoopCandidate> candidates) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "query_id,neighbor_id,vote,rerank,accepted\n" << std::setprecision(17);
  for (const auto& c : candidates) {
    out << c.query << ',' << c.neighbor << ',' << c.vote_score << ',' << c.rerank_score << ','
        << (c.accepted ? 1 : 0) << '\n';
  }
}

}  // namespace demslam
