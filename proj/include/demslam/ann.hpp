#pragma once

// Cosine-similarity nearest-neighbor search over unit descriptors: an HNSW
// graph index, an exhaustive oracle, and recall measurement.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <unordered_map>
#include <shared_mutex>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace demslam {

/// Throws ZeroVector if either input has zero norm.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Composite tile id: submap in the high 32 bits, tile index in the low 32.
inline constexpr std::uint64_t make_tile_id(std::uint32_t submap, std::uint32_t tile_idx) {
  return (static_cast<std::uint64_t>(submap) << 32) | tile_idx;
}
inline constexpr std::uint32_t submap_of(std::uint64_t id) {
  return static_cast<std::uint32_t>(id >> 32);
}
inline constexpr std::uint32_t tile_of(std::uint64_t id) {
  return static_cast<std::uint32_t>(id & 0xFFFFFFFFu);
}

struct IndexParams {
  int M{16};
  int ef_construction{200};
  int ef_search{128};
  std::uint64_t seed{0};

  void validate() const;
};

struct SearchHit {
  std::uint64_t id{0};
  double similarity{0.0};
};

using IdFilter = std::function<bool(std::uint64_t)>;

class HnswIndex {
 public:
  HnswIndex(int dim, IndexParams params);
  HnswIndex(const HnswIndex&) = delete;
  HnswIndex& operator=(const HnswIndex&) = delete;
  HnswIndex(HnswIndex&& other) noexcept;
  HnswIndex& operator=(HnswIndex&&) = delete;

  /// Stores the normalized vector. Throws DuplicateId, DimensionMismatch,
  /// ZeroVector.
  void insert(std::uint64_t id, const Eigen::VectorXd& vector);

  /// Up to k hits by non-increasing similarity. Tombstoned ids and ids
  /// rejected by `accept` are skipped during traversal, not just trimmed
  /// afterwards. ef <= 0 uses params().ef_search; the effective list size is
  /// at least k. Throws EmptyIndex.
  [[nodiscard]] std::vector<SearchHit> search(const Eigen::VectorXd& query, int k,
                                              const IdFilter& accept = {}, int ef = 0) const;

  /// Hides an id from future results; the node stays in the graph.
  void tombstone(std::uint64_t id);

  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] int dim() const noexcept { return dim_; }
  [[nodiscard]] const IndexParams& params() const noexcept { return params_; }
  [[nodiscard]] bool contains(std::uint64_t id) const;
  [[nodiscard]] int max_level() const;

  void save(const std::filesystem::path& path) const;
  static HnswIndex load(const std::filesystem::path& path);

 private:
  using Node = std::uint32_t;
  struct Candidate {
    double dist;
    Node node;
  };

  [[nodiscard]] double distance(const double* q, Node n) const;
  [[nodiscard]] const double* data(Node n) const { return vectors_.data() + std::size_t(n) * dim_; }
  [[nodiscard]] int draw_level(std::uint64_t id) const;
  [[nodiscard]] Node greedy_descend(const double* q, Node entry, int from_level, int to_level) const;
  [[nodiscard]] std::vector<Candidate> search_layer(const double* q, Node entry, int ef, int level,
                                                    const std::function<bool(Node)>& admit) const;
  [[nodiscard]] std::vector<Node> select_neighbors(const std::vector<Candidate>& sorted,
                                                   std::size_t m) const;
  void shrink_links(Node n, int level);
  [[nodiscard]] std::size_t max_links(int level) const {
    return static_cast<std::size_t>(level == 0 ? 2 * params_.M : params_.M);
  }

  int dim_;
  IndexParams params_;
  std::vector<double> vectors_;
  std::vector<std::uint64_t> ids_;
  std::vector<int> levels_;
  std::vector<std::vector<std::vector<Node>>> links_;  // [node][level]
  std::unordered_map<std::uint64_t, Node> id_lookup_;
  std::set<std::uint64_t> tombstones_;
  Node entry_{0};
  int top_level_{-1};
  mutable std::shared_mutex mutex_;
};

struct IndexedVector {
  std::uint64_t id{0};
  Eigen::VectorXd vector;
};

/// Exhaustive top-k by cosine similarity; ties go to the lower id. Throws
/// EmptyIndex.
std::vector<SearchHit> exact_search(std::span<const IndexedVector> entries,
                                    const Eigen::VectorXd& query, int k);

/// Mean over queries of |ANN(q) ∩ GT(q)| / k, using the first k ids of each.
double recall_at_k(std::span<const std::vector<std::uint64_t>> ann,
                   std::span<const std::vector<std::uint64_t>> truth, int k);

/// Runs both searches for every query and reports recall.
double recall_at_k(const HnswIndex& index, std::span<const IndexedVector> entries,
                   std::span<const Eigen::VectorXd> queries, int k, int ef = 0);

}  // namespace demslam
