#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "common.hpp"
#include "demslam/ann.hpp"
#include "demslam/covis.hpp"
#include "demslam/error.hpp"

using namespace demslam;

namespace {

std::vector<TileHit> random_hits(Rng& rng, int n) {
  std::uniform_int_distribution<int> sub(0, 11);
  std::uniform_int_distribution<int> tile(0, 40);
  std::uniform_real_distribution<double> sim(0.0, 1.0);
  std::vector<TileHit> hits(n);
  for (auto& h : hits) {
    h.chip_id = static_cast<std::uint32_t>(tile(rng));
    h.tile_id = make_tile_id(static_cast<std::uint32_t>(sub(rng)), static_cast<std::uint32_t>(tile(rng)));
    h.similarity = sim(rng);
  }
  return hits;
}

}  // namespace

TEST_CASE("voting") {
  const std::vector<TileHit> hits{{0, make_tile_id(1, 3), 0.9}, {1, make_tile_id(1, 4), 0.8}, {0, make_tile_id(2, 0), 0.5}};
  const auto s = vote_submaps(hits);
  CHECK(s.at(1) == doctest::Approx(1.7));
  CHECK(s.at(2) == doctest::Approx(0.5));
  CHECK(vote_submaps({}).empty());
  const std::vector<TileHit> one{{0, make_tile_id(4, 1), 0.3}};
  CHECK(vote_submaps(one).at(4) == 0.3);
}

TEST_CASE("voting and selection against brute force") {
  Rng rng(1);
  SelectParams p;
  p.temporal_window = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto hits = random_hits(rng, 60);
    const auto s = vote_submaps(hits);
    std::map<SubmapId, double> brute;
    for (const auto& h : hits) brute[submap_of(h.tile_id)] += h.similarity;
    REQUIRE(s.size() == brute.size());
    for (const auto& [id, v] : brute) CHECK(s.at(id) == doctest::Approx(v).epsilon(1e-12));

    // Permutation invariance and additivity over disjoint hit sets.
    std::shuffle(hits.begin(), hits.end(), rng);
    const auto s2 = vote_submaps(hits);
    for (const auto& [id, v] : s) CHECK(s2.at(id) == doctest::Approx(v).epsilon(1e-12));
    const std::span<const TileHit> all(hits);
    const auto a = vote_submaps(all.first(25));
    const auto b = vote_submaps(all.subspan(25));
    for (const auto& [id, v] : s) {
      const double sum = (a.contains(id) ? a.at(id) : 0.0) + (b.contains(id) ? b.at(id) : 0.0);
      CHECK(sum == doctest::Approx(v).epsilon(1e-12));
    }

    // Top-K by sort.
    p.top_k = 5;
    p.tau_s = 1.0;
    const auto sel = select_covisible(s, 100, p);
    std::vector<std::pair<double, SubmapId>> order;
    for (const auto& [id, v] : s) {
      if (v >= p.tau_s) order.emplace_back(-v, id);
    }
    std::sort(order.begin(), order.end());
    REQUIRE(sel.size() == std::min<std::size_t>(5, order.size()));
    for (std::size_t k = 0; k < sel.size(); ++k) {
      CHECK(sel[k].id == order[k].second);
      CHECK(sel[k].score >= p.tau_s);
    }

    // Scaling by lambda keeps the ranking.
    std::vector<TileHit> scaled = hits;
    for (auto& h : scaled) h.similarity *= 3.5;
    SelectParams q = p;
    q.tau_s = p.tau_s * 3.5;
    const auto sel2 = select_covisible(vote_submaps(scaled), 100, q);
    REQUIRE(sel2.size() == sel.size());
    for (std::size_t k = 0; k < sel.size(); ++k) {
      CHECK(sel2[k].id == sel[k].id);
      CHECK(sel2[k].score == doctest::Approx(3.5 * sel[k].score));
    }
  }
}

TEST_CASE("selection rules") {
  const std::map<SubmapId, double> s{{1, 1.7}, {2, 0.5}};
  SelectParams p;
  p.tau_s = 1.0;
  p.temporal_window = 0;
  const auto sel = select_covisible(s, 9, p);
  REQUIRE(sel.size() == 1);
  CHECK(sel[0].id == 1);
  p.tau_s = 5.0;
  CHECK(select_covisible(s, 9, p).empty());

  std::map<SubmapId, double> many;
  for (SubmapId k = 0; k < 15; ++k) many[k] = 2.0 + k;
  p.tau_s = 1.0;
  p.top_k = 10;
  p.temporal_window = 0;
  const auto ten = select_covisible(many, 100, p);
  REQUIRE(ten.size() == 10);
  CHECK(ten.front().id == 14);
  CHECK(ten.back().id == 5);

  // The query and its temporal predecessors never come back.
  p.temporal_window = 2;
  for (const auto& x : select_covisible(many, 14, p)) {
    CHECK(x.id != 14);
    CHECK(x.id != 13);
    CHECK(x.id != 12);
  }
}

TEST_CASE("rerank") {
  Rng rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  const auto vec = [&] {
    Eigen::VectorXd v(8);
    for (int k = 0; k < 8; ++k) v(k) = g(rng);
    return Eigen::VectorXd(v.normalized());
  };
  std::vector<Eigen::VectorXd> chips;
  for (int k = 0; k < 6; ++k) chips.push_back(vec());

  SUBCASE("the query's own tiles score highest") {
    std::vector<std::vector<Eigen::VectorXd>> cands{chips};
    for (int c = 0; c < 4; ++c) {
      std::vector<Eigen::VectorXd> t;
      for (int k = 0; k < 10; ++k) t.push_back(vec());
      cands.push_back(t);
    }
    const double self = rerank_vpr(chips, cands[0], 3);
    for (std::size_t c = 1; c < cands.size(); ++c) CHECK(rerank_vpr(chips, cands[c], 3) < self);
  }
  SUBCASE("orthogonal candidate scores zero") {
    const std::vector<Eigen::VectorXd> q{Eigen::Vector2d(1, 0)};
    const std::vector<Eigen::VectorXd> c{Eigen::Vector2d(0, 1), Eigen::Vector2d(0, -1)};
    CHECK(std::abs(rerank_vpr(q, c, 2)) < 1e-12);
  }
  SUBCASE("matches exhaustive top-k' voting") {
    for (int c = 0; c < 3; ++c) {
      std::vector<Eigen::VectorXd> t;
      for (int k = 0; k < 7; ++k) t.push_back(k < 2 * c ? Eigen::VectorXd(chips[k % 6]) : vec());
      double brute = 0.0;
      for (const auto& q : chips) {
        std::vector<double> s;
        for (const auto& x : t) s.push_back(q.dot(x));
        std::sort(s.rbegin(), s.rend());
        for (int k = 0; k < 4; ++k) brute += s[k];
      }
      CHECK(rerank_vpr(chips, t, 4) == doctest::Approx(brute).epsilon(1e-12));
    }
  }
  SUBCASE("empty candidate") {
    CHECK_THROWS_AS(rerank_vpr(chips, {}, 3), Error);
  }
}

TEST_CASE("rerank acceptance") {
  std::vector<LoopCandidate> c{{9, 1, 5, 10.0, false}, {9, 2, 4, 8.0, false}, {9, 3, 3, 7.9, false}};
  const auto out = accept_by_rerank(c, 0.8);
  CHECK(out[0].accepted);
  CHECK(out[1].accepted);
  CHECK_FALSE(out[2].accepted);
}

TEST_CASE("covisibility graph") {
  SUBCASE("first edge") {
    CovisGraph g;
    const std::vector<LoopCandidate> acc{{5, 2, 1.0, 0.5, true}};
    g.update(5, acc);
    CHECK(g.nodes().size() == 2);
    CHECK(g.edges().size() == 1);
  }
  SUBCASE("max rule keeps the stronger score") {
    CovisGraph g;
    g.update(5, std::vector<LoopCandidate>{{5, 2, 1.0, 0.5, true}});
    g.update(2, std::vector<LoopCandidate>{{2, 5, 0.4, 0.1, true}});
    REQUIRE(g.edges().size() == 1);
    CHECK(g.edges()[0].vote_score == 1.0);
    CHECK(g.edges()[0].rerank_score == 0.5);
  }
  SUBCASE("self edges are rejected") {
    CovisGraph g;
    CHECK_THROWS_AS(g.update(3, std::vector<LoopCandidate>{{3, 3, 1, 1, true}}), Error);
  }
  SUBCASE("replay equals brute-force construction and stays simple") {
    Rng rng(3);
    std::uniform_int_distribution<SubmapId> id(0, 6);
    std::uniform_real_distribution<double> s(0, 1);
    CovisGraph g;
    std::set<SubmapId> nodes;
    std::map<std::pair<SubmapId, SubmapId>, double> edges;
    for (int step = 0; step < 5; ++step) {
      const SubmapId q = id(rng);
      std::vector<LoopCandidate> acc;
      for (int k = 0; k < 3; ++k) {
        SubmapId n = id(rng);
        if (n == q) continue;
        acc.push_back({q, n, s(rng), s(rng), true});
      }
      g.update(q, acc);
      nodes.insert(q);
      for (const auto& c : acc) {
        nodes.insert(c.neighbor);
        const auto key = std::minmax(c.query, c.neighbor);
        edges[{key.first, key.second}] = std::max(edges[{key.first, key.second}], c.vote_score);
      }
    }
    CHECK(g.nodes() == std::vector<SubmapId>(nodes.begin(), nodes.end()));
    const auto ge = g.edges();
    REQUIRE(ge.size() == edges.size());
    for (const auto& e : ge) {
      CHECK(e.a != e.b);
      CHECK(e.vote_score == edges.at({std::min(e.a, e.b), std::max(e.a, e.b)}));
    }
    const auto dir = testutil::temp_dir("covis");
    g.save_json(dir / "c.json");
    const CovisGraph back = CovisGraph::load_json(dir / "c.json");
    CHECK(back.nodes() == g.nodes());
    CHECK(back.edges().size() == ge.size());
  }
}
