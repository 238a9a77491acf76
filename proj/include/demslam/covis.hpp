#pragma once

// Submap-level voting over tile hits, covisible-neighbor selection, exact
// re-ranking, and the covisibility graph.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "demslam/ann.hpp"

namespace demslam {

using SubmapId = std::uint32_t;

struct TileHit {
  std::uint32_t chip_id{0};
  std::uint64_t tile_id{0};
  double similarity{0.0};
};

/// Score(S) = sum of the similarities of S's tiles over all hits.
std::map<SubmapId, double> vote_submaps(std::span<const TileHit> hits);

struct ScoredSubmap {
  SubmapId id{0};
  double score{0.0};
};

struct SelectParams {
  double tau_s{0.0};
  int top_k{10};
  /// Submaps query-1 .. query-window are excluded as odometry neighbors.
  int temporal_window{1};
};

/// Scores >= tau_s, best first (lower id wins ties), at most top_k, with the
/// query submap and its temporal predecessors removed.
std::vector<ScoredSubmap> select_covisible(const std::map<SubmapId, double>& scores,
                                           SubmapId query, const SelectParams& params);

/// Sum over query chips of the top-k' exact cosine similarities against the
/// candidate's tile descriptors. Throws EmptyCandidate.
double rerank_vpr(std::span<const Eigen::VectorXd> query_chips,
                  std::span<const Eigen::VectorXd> candidate_tiles, int k_prime = 5);

struct LoopCandidate {
  SubmapId query{0};
  SubmapId neighbor{0};
  double vote_score{0.0};
  double rerank_score{0.0};
  bool accepted{false};
};

/// Candidates whose rerank score reaches rho times the best one.
std::vector<LoopCandidate> accept_by_rerank(std::vector<LoopCandidate> candidates, double rho);

struct CovisEdge {
  SubmapId a{0};
  SubmapId b{0};
  double vote_score{0.0};
  double rerank_score{0.0};
};

/// Simple undirected graph. Writers serialize on an internal mutex;
/// snapshot() returns a consistent copy for readers.
class CovisGraph {
 public:
  CovisGraph() = default;
  CovisGraph(const CovisGraph& other);
  CovisGraph& operator=(const CovisGraph& other);

  void add_node(SubmapId id);
  /// Adds the query node and one edge per candidate; an existing edge keeps
  /// the max of old and new scores. Throws SelfEdge.
  void update(SubmapId query, std::span<const LoopCandidate> accepted);

  [[nodiscard]] std::vector<SubmapId> nodes() const;
  [[nodiscard]] std::vector<CovisEdge> edges() const;
  [[nodiscard]] CovisGraph snapshot() const { return *this; }

  void save_json(const std::filesystem::path& path) const;
  static CovisGraph load_json(const std::filesystem::path& path);

 private:
  mutable std::mutex mutex_;
  std::vector<SubmapId> nodes_;  // sorted
  std::map<std::pair<SubmapId, SubmapId>, CovisEdge> edges_;
};

/// CSV rows: query_id,neighbor_id,vote,rerank,accepted.
void write_candidate_log(const std::filesystem::path& path,
                         std::span<const LoopCandidate> candidates);

}  // namespace demslam
