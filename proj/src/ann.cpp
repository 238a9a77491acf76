#include "demslam/ann.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <queue>
#include <string>

#include "binary_io.hpp"
#include "demslam/error.hpp"
#include "demslam/random.hpp"

namespace demslam {
namespace {

constexpr std::string_view kIndexMagic{"DEMHNSW1", 8};
constexpr int kMaxLevel = 16;

Eigen::VectorXd unit(const Eigen::VectorXd& v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero vector");
  return v / n;
}

}  // namespace

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "vector sizes differ");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw Error(ErrorCode::ZeroVector, "zero-norm vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

void IndexParams::validate() const {
  if (M < 2) throw Error(ErrorCode::ConfigError, "M must be >= 2");
  if (ef_construction < 1) throw Error(ErrorCode::ConfigError, "ef_construction must be >= 1");
  if (ef_search < 1) throw Error(ErrorCode::ConfigError, "ef_search must be >= 1");
}

HnswIndex::HnswIndex(int dim, IndexParams params) : dim_(dim), params_(params) {
  if (dim < 1) throw Error(ErrorCode::DimensionMismatch, "index dimension must be positive");
  params_.validate();
}

HnswIndex::HnswIndex(HnswIndex&& other) noexcept : dim_(other.dim_), params_(other.params_) {
  std::unique_lock lock(other.mutex_);
  vectors_ = std::move(other.vectors_);
  ids_ = std::move(other.ids_);
  levels_ = std::move(other.levels_);
  links_ = std::move(other.links_);
  id_lookup_ = std::move(other.id_lookup_);
  tombstones_ = std::move(other.tombstones_);
  entry_ = other.entry_;
  top_level_ = other.top_level_;
  other.top_level_ = -1;
}

double HnswIndex::distance(const double* q, Node n) const {
  const double* v = data(n);
  double dot = 0.0;
  for (int k = 0; k < dim_; ++k) dot += q[k] * v[k];
  return 1.0 - dot;
}

int HnswIndex::draw_level(std::uint64_t id) const {
  const double u = 1.0 - unit_from_bits(derive_seed(params_.seed, id));  // (0, 1]
  const double ml = 1.0 / std::log(static_cast<double>(params_.M));
  return std::min(kMaxLevel, static_cast<int>(std::floor(-std::log(u) * ml)));
}

HnswIndex::Node HnswIndex::greedy_descend(const double* q, Node entry, int from_level,
                                          int to_level) const {
  Node cur = entry;
  double best = distance(q, cur);
  for (int level = from_level; level >= to_level; --level) {
    bool moved = true;
    while (moved) {
      moved = false;
      for (Node nb : links_[cur][level]) {
        const double d = distance(q, nb);
        if (d < best || (d == best && nb < cur)) {
          best = d;
          cur = nb;
          moved = true;
        }
      }
    }
  }
  return cur;
}

std::vector<HnswIndex::Candidate> HnswIndex::search_layer(
    const double* q, Node entry, int ef, int level, const std::function<bool(Node)>& admit) const {
  const auto closer = [](const Candidate& a, const Candidate& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.node < b.node);
  };
  const auto farther = [&](const Candidate& a, const Candidate& b) { return closer(b, a); };
  // frontier pops the closest; results keeps the farthest on top.
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(farther)> frontier(farther);
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(closer)> results(closer);
  std::vector<bool> visited(ids_.size(), false);

  const std::size_t cap = static_cast<std::size_t>(std::max(ef, 1));
  const Candidate start{distance(q, entry), entry};
  visited[entry] = true;
  frontier.push(start);
  if (!admit || admit(entry)) results.push(start);

  while (!frontier.empty()) {
    const Candidate c = frontier.top();
    if (results.size() >= cap && closer(results.top(), c)) break;
    frontier.pop();
    for (Node nb : links_[c.node][level]) {
      if (visited[nb]) continue;
      visited[nb] = true;
      const Candidate e{distance(q, nb), nb};
      if (results.size() < cap || closer(e, results.top())) {
        frontier.push(e);
        if (!admit || admit(nb)) {
          results.push(e);
          if (results.size() > cap) results.pop();
        }
      }
    }
  }
  std::vector<Candidate> out;
  out.reserve(results.size());
  while (!results.empty()) {
    out.push_back(results.top());
    results.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

// Malkov's diversity heuristic: a candidate is kept only if it is closer to
// the base point than to every neighbor already kept. Remaining slots are
// back-filled with the closest pruned candidates so small graphs stay
// connected.
std::vector<HnswIndex::Node> HnswIndex::select_neighbors(const std::vector<Candidate>& sorted,
                                                         std::size_t m) const {
  std::vector<Node> kept;
  std::vector<Node> pruned;
  for (const Candidate& c : sorted) {
    if (kept.size() >= m) break;
    bool diverse = true;
    for (Node r : kept) {
      if (distance(data(c.node), r) < c.dist) {
        diverse = false;
        break;
      }
    }
    (diverse ? kept : pruned).push_back(c.node);
  }
  for (std::size_t i = 0; i < pruned.size() && kept.size() < m; ++i) kept.push_back(pruned[i]);
  return kept;
}

void HnswIndex::shrink_links(Node n, int level) {
  auto& list = links_[n][level];
  std::vector<Candidate> cands;
  cands.reserve(list.size());
  for (Node nb : list) cands.push_back({distance(data(n), nb), nb});
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.node < b.node);
  });
  list = select_neighbors(cands, max_links(level));
}

void HnswIndex::insert(std::uint64_t id, const Eigen::VectorXd& vector) {
  if (vector.size() != dim_) {
    throw Error(ErrorCode::DimensionMismatch, "vector has " + std::to_string(vector.size()) +
                                                  " dims, index expects " + std::to_string(dim_));
  }
  const Eigen::VectorXd v = unit(vector);
  std::unique_lock lock(mutex_);
  if (id_lookup_.contains(id)) {
    throw Error(ErrorCode::DuplicateId, "id " + std::to_string(id) + " already indexed");
  }
  const Node n = static_cast<Node>(ids_.size());
  const int level = draw_level(id);
  vectors_.insert(vectors_.end(), v.data(), v.data() + dim_);
  ids_.push_back(id);
  levels_.push_back(level);
  links_.emplace_back(static_cast<std::size_t>(level) + 1);
  id_lookup_.emplace(id, n);

  if (top_level_ < 0) {
    entry_ = n;
    top_level_ = level;
    return;
  }
  const double* q = data(n);
  Node ep = entry_;
  if (top_level_ > level) ep = greedy_descend(q, entry_, top_level_, level + 1);
  for (int lc = std::min(level, top_level_); lc >= 0; --lc) {
    const auto found = search_layer(q, ep, params_.ef_construction, lc, {});
    auto& mine = links_[n][lc];
    mine = select_neighbors(found, static_cast<std::size_t>(params_.M));
    for (Node nb : mine) {
      links_[nb][lc].push_back(n);
      if (links_[nb][lc].size() > max_links(lc)) shrink_links(nb, lc);
    }
    ep = found.front().node;
  }
  if (level > top_level_) {
    entry_ = n;
    top_level_ = level;
  }
}

std::vector<SearchHit> HnswIndex::search(const Eigen::VectorXd& query, int k,
                                         const IdFilter& accept, int ef) const {
  if (k < 1) throw Error(ErrorCode::ConfigError, "k must be >= 1");
  if (query.size() != dim_) throw Error(ErrorCode::DimensionMismatch, "query dimension");
  const Eigen::VectorXd q = unit(query);
  std::shared_lock lock(mutex_);
  if (top_level_ < 0) throw Error(ErrorCode::EmptyIndex, "search on an empty index");

  const auto admit = [&](Node n) {
    const std::uint64_t id = ids_[n];
    if (!tombstones_.empty() && tombstones_.contains(id)) return false;
    return !accept || accept(id);
  };
  const Node ep = greedy_descend(q.data(), entry_, top_level_, 1);
  const int width = std::max(ef > 0 ? ef : params_.ef_search, k);
  const auto found = search_layer(q.data(), ep, width, 0, admit);

  std::vector<SearchHit> hits;
  hits.reserve(found.size());
  for (const Candidate& c : found) {
    const double sim = Eigen::Map<const Eigen::VectorXd>(data(c.node), dim_).dot(q);
    hits.push_back({ids_[c.node], std::clamp(sim, -1.0, 1.0)});
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
  });
  if (hits.size() > static_cast<std::size_t>(k)) hits.resize(static_cast<std::size_t>(k));
  return hits;
}

void HnswIndex::tombstone(std::uint64_t id) {
  std::unique_lock lock(mutex_);
  tombstones_.insert(id);
}

std::size_t HnswIndex::size() const {
  std::shared_lock lock(mutex_);
  return ids_.size();
}

bool HnswIndex::contains(std::uint64_t id) const {
  std::shared_lock lock(mutex_);
  return id_lookup_.contains(id);
}

int HnswIndex::max_level() const {
  std::shared_lock lock(mutex_);
  return top_level_;
}

void HnswIndex::save(const std::filesystem::path& path) const {
  std::shared_lock lock(mutex_);
  detail::ByteWriter w;
  w.bytes(kIndexMagic);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(params_.M));
  w.u32(static_cast<std::uint32_t>(params_.ef_construction));
  w.u32(static_cast<std::uint32_t>(params_.ef_search));
  w.u64(params_.seed);
  w.u32(static_cast<std::uint32_t>(ids_.size()));
  w.i32(top_level_);
  w.u32(entry_);
  for (Node n = 0; n < ids_.size(); ++n) {
    w.u64(ids_[n]);
    w.i32(levels_[n]);
    for (int k = 0; k < dim_; ++k) w.f64(data(n)[k]);
  }
  for (Node n = 0; n < ids_.size(); ++n) {
    for (const auto& list : links_[n]) {
      w.u32(static_cast<std::uint32_t>(list.size()));
      for (Node nb : list) w.u32(nb);
    }
  }
  w.u32(static_cast<std::uint32_t>(tombstones_.size()));
  for (std::uint64_t id : tombstones_) w.u64(id);
  w.save(path);
}

HnswIndex HnswIndex::load(const std::filesystem::path& path) {
  detail::ByteReader r(path);
  r.expect_magic(kIndexMagic);
  const auto dim = static_cast<int>(r.u32());
  IndexParams p;
  p.M = static_cast<int>(r.u32());
  p.ef_construction = static_cast<int>(r.u32());
  p.ef_search = static_cast<int>(r.u32());
  p.seed = r.u64();
  if (dim < 1 || p.M < 2) throw Error(ErrorCode::FormatError, r.name() + ": bad params block");
  HnswIndex index(dim, p);
  const std::uint32_t count = r.u32();
  index.top_level_ = r.i32();
  index.entry_ = r.u32();
  if (count > 0 && (index.entry_ >= count || index.top_level_ < 0)) {
    throw Error(ErrorCode::FormatError, r.name() + ": bad entry point");
  }
  r.need(static_cast<std::size_t>(count) * (12 + 8 * static_cast<std::size_t>(dim)));
  index.vectors_.reserve(static_cast<std::size_t>(count) * dim);
  for (std::uint32_t n = 0; n < count; ++n) {
    const std::uint64_t id = r.u64();
    const int level = r.i32();
    if (level < 0 || level > kMaxLevel) throw Error(ErrorCode::FormatError, r.name() + ": bad level");
    for (int k = 0; k < dim; ++k) index.vectors_.push_back(r.f64());
    index.ids_.push_back(id);
    index.levels_.push_back(level);
    if (!index.id_lookup_.emplace(id, n).second) {
      throw Error(ErrorCode::FormatError, r.name() + ": duplicate id");
    }
  }
  index.links_.resize(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    index.links_[n].resize(static_cast<std::size_t>(index.levels_[n]) + 1);
    for (auto& list : index.links_[n]) {
      const std::uint32_t m = r.u32();
      r.need(static_cast<std::size_t>(m) * 4);
      list.resize(m);
      for (auto& nb : list) {
        nb = r.u32();
        if (nb >= count) throw Error(ErrorCode::FormatError, r.name() + ": link out of range");
      }
    }
  }
  const std::uint32_t dead = r.u32();
  for (std::uint32_t i = 0; i < dead; ++i) index.tombstones_.insert(r.u64());
  if (r.remaining() != 0) throw Error(ErrorCode::FormatError, r.name() + ": trailing bytes");
  return index;
}

std::vector<SearchHit> exact_search(std::span<const IndexedVector> entries,
                                    const Eigen::VectorXd& query, int k) {
  if (entries.empty()) throw Error(ErrorCode::EmptyIndex, "no entries to search");
  if (k < 1) throw Error(ErrorCode::ConfigError, "k must be >= 1");
  const Eigen::VectorXd q = unit(query);
  std::vector<SearchHit> all;
  all.reserve(entries.size());
  for (const auto& e : entries) all.push_back({e.id, unit(e.vector).dot(q)});
  const auto order = [](const SearchHit& a, const SearchHit& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
  };
  const auto keep = std::min(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), order);
  all.resize(keep);
  return all;
}

double recall_at_k(std::span<const std::vector<std::uint64_t>> ann,
                   std::span<const std::vector<std::uint64_t>> truth, int k) {
  if (ann.size() != truth.size()) throw Error(ErrorCode::DimensionMismatch, "query counts differ");
  if (ann.empty() || k < 1) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < ann.size(); ++q) {
    const auto ka = std::min(ann[q].size(), static_cast<std::size_t>(k));
    const auto kt = std::min(truth[q].size(), static_cast<std::size_t>(k));
    std::set<std::uint64_t> gt(truth[q].begin(), truth[q].begin() + static_cast<std::ptrdiff_t>(kt));
    int hit = 0;
    for (std::size_t i = 0; i < ka; ++i) hit += gt.contains(ann[q][i]) ? 1 : 0;
    total += static_cast<double>(hit) / k;
  }
  return total / static_cast<double>(ann.size());
}

double recall_at_k(const HnswIndex& index, std::span<const IndexedVector> entries,
                   std::span<const Eigen::VectorXd> queries, int k, int ef) {
  std::vector<std::vector<std::uint64_t>> ann;
  std::vector<std::vector<std::uint64_t>> truth;
  for (const auto& q : queries) {
    auto& a = ann.emplace_back();
    for (const auto& h : index.search(q, k, {}, ef)) a.push_back(h.id);
    auto& t = truth.emplace_back();
    for (const auto& h : exact_search(entries, q, k)) t.push_back(h.id);
  }
  return recall_at_k(ann, truth, k);
}

}  // namespace demslam
