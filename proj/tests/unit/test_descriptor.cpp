#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "common.hpp"
#include "demslam/dem.hpp"
#include "demslam/descriptor.hpp"
#include "demslam/error.hpp"

using namespace demslam;

namespace {

Region region_of(int n, const std::function<double(int, int)>& f) {
  Region r{n, n, std::vector<double>(static_cast<std::size_t>(n) * n)};
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) r.values[y * n + x] = f(y, x);
  }
  return r;
}

TiledRaster random_raster(Rng& rng, int tiles, int tile_px) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TiledRaster r{tile_px, tiles, tiles, {}};
  for (int v = 0; v < tiles; ++v) {
    for (int t = 0; t < tiles; ++t) {
      std::vector<double> d(static_cast<std::size_t>(tile_px) * tile_px);
      for (auto& x : d) x = u(rng);
      r.tiles[{t, v}] = d;
    }
  }
  return r;
}

DemGrid bumpy_grid(int w, int h, int tile_px) {
  std::vector<Eigen::Vector3d> pts;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      pts.emplace_back(x, y, std::sin(0.7 * x) * std::cos(0.3 * y) + 0.05 * x + (x * y % 7) * 0.1);
    }
  }
  DemParams p;
  p.tile_px = tile_px;
  return rasterize(pts, p, Bounds{0.0, double(w), 0.0, double(h)}, 1.0);
}

}  // namespace

TEST_CASE("orientation bins") {
  CHECK(orientation_bin(0.0, 0.0) == -1);
  CHECK(orientation_bin(1.0, 0.0) == 0);
  CHECK(orientation_bin(1.0, 1.0) == 1);
  CHECK(orientation_bin(0.0, 1.0) == 2);
  CHECK(orientation_bin(-1.0, 0.0) == 4);
  CHECK(orientation_bin(0.0, -1.0) == 6);
  CHECK(orientation_bin(1.0, -0.01) == 7);
}

TEST_CASE("builtin encoder") {
  SUBCASE("constant region has empty histograms and zero variance") {
    const auto toks = encode_builtin(region_of(8, [](int, int) { return 0.4; }), 4);
    REQUIRE(toks.size() == 4);
    for (const auto& t : toks) {
      CHECK(t.feature.head<8>().isZero(0.0));
      CHECK(t.feature(8) == doctest::Approx(0.4));
      CHECK(t.feature(9) == doctest::Approx(0.0));
      CHECK(t.feature(10) == 0.0);
      CHECK(t.feature.size() == kBuiltinDim);
    }
    CHECK(toks[1].position == Eigen::Vector2d(2.0, 6.0));
  }
  SUBCASE("a quarter turn shifts every histogram by two bins") {
    Rng rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Region a = region_of(16, [&](int, int) { return u(rng); });
    // b(r, c) = a(c, 15 - r): the image rotated by 90 degrees.
    const Region b = region_of(16, [&](int r, int c) { return a.at(c, 15 - r); });
    const auto ta = encode_builtin(a, 4);
    const auto tb = encode_builtin(b, 4);
    for (int pr = 0; pr < 4; ++pr) {
      for (int pc = 0; pc < 4; ++pc) {
        // Patch (pr, pc) of b shows patch (pc, 3 - pr) of a.
        const auto& fa = ta[pc * 4 + (3 - pr)].feature;
        const auto& fb = tb[pr * 4 + pc].feature;
        // Directions turn by -90 degrees: two bins back.
        for (int k = 0; k < 8; ++k) CHECK(fb((k + 6) % 8) == doctest::Approx(fa(k)).epsilon(1e-12));
        CHECK(fb(8) == doctest::Approx(fa(8)));
        CHECK(fb(9) == doctest::Approx(fa(9)));
      }
    }
  }
  SUBCASE("tokens only see their own patch") {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Region a = region_of(8, [&](int, int) { return u(rng); });
    const auto before = encode_builtin(a, 4);
    for (int r = 0; r < 4; ++r) {
      for (int c = 4; c < 8; ++c) a.values[r * 8 + c] = 0.0;
    }
    const auto after = encode_builtin(a, 4);
    CHECK(after[0].feature == before[0].feature);
    CHECK(after[2].feature == before[2].feature);
    CHECK(after[3].feature == before[3].feature);
    CHECK(after[1].feature != before[1].feature);
    // Pure function.
    CHECK(encode_builtin(a, 4)[1].feature == after[1].feature);
  }
  SUBCASE("partial patches and empty regions") {
    const auto toks = encode_builtin(region_of(6, [](int, int) { return 0.5; }), 4);
    REQUIRE(toks.size() == 4);
    CHECK(toks[3].feature(10) == doctest::Approx(1.0 - 4.0 / 16.0));
    CHECK_THROWS_AS(encode_builtin(region_of(4, [](int, int) { return kEmpty; }), 4), Error);
  }
}

TEST_CASE("Gaussian weights") {
  const std::vector<Eigen::Vector2d> pos{{0, 0}, {3, 4}, {100, 100}};
  const auto w = gaussian_weights(pos, {0, 0}, 5.0);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == doctest::Approx(std::exp(-0.5)));
  for (double x : gaussian_weights(pos, {0, 0}, 1e9)) CHECK(x == doctest::Approx(1.0));
  CHECK_THROWS_AS(gaussian_weights(pos, {0, 0}, 0.0), Error);
}

TEST_CASE("visibility mask") {
  // Three patches of a strip: flat, ramp, flat.
  const std::vector<double> g{0.0, 0.8, 0.0};
  const auto m = visibility_mask(g, 0.8);
  CHECK(m == std::vector<double>{0.0, 1.0, 0.0});
  const auto half = visibility_mask(std::vector<double>{0.2, 0.4, kEmpty}, 0.8);
  CHECK(half[0] == doctest::Approx(0.25));
  CHECK(half[1] == doctest::Approx(0.5));
  CHECK(half[2] == 0.0);
  CHECK(visibility_mask(std::vector<double>{3.0}, 1.0)[0] == 1.0);
  CHECK(visibility_mask(std::vector<double>{3.0}, 0.0)[0] == 0.0);
}

TEST_CASE("masked pooling") {
  const auto tok = [](std::initializer_list<double> v, double r = 0, double c = 0) {
    PatchToken t;
    t.position = {r, c};
    t.feature = Eigen::Map<const Eigen::VectorXd>(v.begin(), static_cast<Eigen::Index>(v.size()));
    return t;
  };
  SUBCASE("single token") {
    const std::vector<PatchToken> t{tok({3, 4})};
    const auto d = pool_descriptor(t, std::vector<double>{1}, std::vector<double>{1});
    CHECK((d.vector - Eigen::Vector2d(0.6, 0.8)).norm() < 1e-15);
    CHECK(d.normalized);
  }
  SUBCASE("masked token drops out") {
    const std::vector<PatchToken> t{tok({1, 0}), tok({0, 1})};
    const auto d = pool_descriptor(t, std::vector<double>{1, 1}, std::vector<double>{1, 0});
    CHECK((d.vector - Eigen::Vector2d(1, 0)).norm() == 0.0);
  }
  SUBCASE("hand arithmetic on three tokens") {
    const std::vector<PatchToken> t{tok({1, 0, 0}), tok({0, 2, 0}), tok({0, 0, 3})};
    const std::vector<double> w{0.5, 1.0, 0.25};
    const std::vector<double> m{1.0, 0.5, 0.8};
    // sum(wm f) / sum(wm) = (0.5, 1.0, 0.6) / 1.2, then unit length.
    Eigen::Vector3d expect(0.5, 1.0, 0.6);
    expect /= 1.2;
    expect.normalize();
    CHECK((pool_descriptor(t, w, m).vector - expect).norm() < 1e-15);
  }
  SUBCASE("invariances") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    std::vector<PatchToken> t;
    std::vector<double> w;
    std::vector<double> m;
    for (int k = 0; k < 9; ++k) {
      t.push_back(tok({u(rng), u(rng), u(rng), u(rng)}));
      w.push_back(u(rng));
      m.push_back(u(rng));
    }
    const auto base = pool_descriptor(t, w, m).vector;
    std::vector<double> w3 = w;
    for (auto& x : w3) x *= 3.7;
    CHECK((pool_descriptor(t, w3, m).vector - base).norm() < 1e-14);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<PatchToken> tp;
    std::vector<double> wp;
    std::vector<double> mp;
    for (auto k : perm) {
      tp.push_back(t[k]);
      wp.push_back(w[k]);
      mp.push_back(m[k]);
    }
    CHECK((pool_descriptor(tp, wp, mp).vector - base).norm() < 1e-14);
    // Before normalization the mean lies inside the per-coordinate range of the tokens.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
    double s = 0.0;
    for (int k = 0; k < 9; ++k) {
      mean += w[k] * m[k] * t[k].feature;
      s += w[k] * m[k];
    }
    mean /= s;
    for (int c = 0; c < 4; ++c) {
      double lo = 1e9;
      double hi = -1e9;
      for (const auto& x : t) {
        lo = std::min(lo, x.feature(c));
        hi = std::max(hi, x.feature(c));
      }
      CHECK(mean(c) >= lo);
      CHECK(mean(c) <= hi);
    }
    CHECK((mean.normalized() - base).norm() < 1e-14);
  }
  SUBCASE("nothing salient") {
    const std::vector<PatchToken> t{tok({1, 0})};
    CHECK_THROWS_AS(pool_descriptor(t, std::vector<double>{1}, std::vector<double>{0}), Error);
  }
}

TEST_CASE("tile and chip embeddings") {
  SUBCASE("one-tile grid: tile and chip descriptors coincide") {
    const DemGrid g = bumpy_grid(8, 8, 8);
    REQUIRE(g.tiles.size() == 1);
    const BuiltinEncoder enc(4);
    const auto a = embed_global_tile(g, {0, 0}, enc);
    const auto b = embed_query_chip(g, {0, 0}, enc);
    CHECK(a.vector == b.vector);
    CHECK(embed_global_tile(bumpy_grid(8, 8, 8), {0, 0}, enc).vector == a.vector);
  }
  SUBCASE("only in-neighborhood tiles matter") {
    Rng rng(4);
    const TiledRaster base = random_raster(rng, 12, 8);
    const BuiltinEncoder enc(4);
    const auto embed = [&](const TiledRaster& r) {
      const TileEmbedder e(r, sobel_magnitude(r), enc);
      return e.embed_global_tile({1, 1}, 3).vector;
    };
    const Eigen::VectorXd d0 = embed(base);
    TiledRaster near = base;
    for (auto& x : near.tiles[{2, 2}]) x = 1.0 - x;
    CHECK((embed(near) - d0).norm() > 1e-9);
    TiledRaster far = base;
    for (auto& x : far.tiles[{11, 11}]) x = 1.0 - x;
    CHECK(embed(far) == d0);
  }
  SUBCASE("chip position changes the Gaussian center") {
    const DemGrid g = bumpy_grid(32, 32, 8);
    const BuiltinEncoder enc(4);
    const auto center = embed_query_chip(g, {1, 1}, enc);
    const auto corner = embed_query_chip(g, {0, 0}, enc);
    CHECK((center.vector - corner.vector).norm() > 1e-6);
  }
  SUBCASE("identical tokens pool to that token") {
    const DemGrid g = bumpy_grid(16, 16, 8);
    PrecomputedEncoder enc(3, 4);
    Eigen::Vector3d f(0.2, 0.3, 0.9);
    for (const auto& [idx, t] : g.tiles) {
      std::vector<PatchToken> toks;
      for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 2; ++c) toks.push_back({Eigen::Vector2d(2 + 4 * r, 2 + 4 * c), f});
      }
      enc.add(idx, toks);
    }
    CHECK((embed_query_chip(g, {0, 1}, enc).vector - f.normalized()).norm() < 1e-12);
  }
}

TEST_CASE("token files") {
  const auto dir = testutil::temp_dir("tokens");
  Rng rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  SUBCASE("round trip is exact for float payloads") {
    std::vector<PatchToken> toks(5);
    for (auto& t : toks) {
      t.position = {static_cast<float>(g(rng)), static_cast<float>(g(rng))};
      t.feature = Eigen::VectorXd(7);
      for (int k = 0; k < 7; ++k) t.feature(k) = static_cast<float>(g(rng));
    }
    save_tokens(dir / "a.tok", toks, 7, 14);
    const TokenFile f = load_precomputed_tokens(dir / "a.tok", 7);
    CHECK(f.dim == 7);
    CHECK(f.patch_px == 14);
    REQUIRE(f.tokens.size() == 5);
    for (int k = 0; k < 5; ++k) {
      CHECK(f.tokens[k].position.x() == static_cast<double>(static_cast<float>(toks[k].position.x())));
      CHECK(f.tokens[k].position.y() == static_cast<double>(static_cast<float>(toks[k].position.y())));
      CHECK(f.tokens[k].feature == toks[k].feature);
    }
    CHECK_THROWS_AS(load_precomputed_tokens(dir / "a.tok", 8), Error);
  }
  SUBCASE("196 tokens of 768 dims") {
    std::vector<PatchToken> toks(196);
    for (int k = 0; k < 196; ++k) {
      toks[k].position = {7.0 + 14 * (k / 14), 7.0 + 14 * (k % 14)};
      toks[k].feature = Eigen::VectorXd::Constant(768, k * 0.5);
    }
    save_tokens(dir / "b.tok", toks, 768, 14);
    const TokenFile f = load_precomputed_tokens(dir / "b.tok");
    CHECK(f.tokens.size() == 196);
    for (const auto& t : f.tokens) CHECK(t.feature.size() == 768);
    CHECK(f.tokens[195].feature(767) == 97.5);
  }
  SUBCASE("bad magic and truncation") {
    {
      std::ofstream out(dir / "bad.tok", std::ios::binary);
      out << "NOTATOK1" << std::string(12, '\0');
    }
    CHECK_THROWS_AS(load_precomputed_tokens(dir / "bad.tok"), Error);
    std::vector<PatchToken> toks(2, PatchToken{{0, 0}, Eigen::VectorXd::Ones(4)});
    save_tokens(dir / "t.tok", toks, 4, 4);
    std::filesystem::resize_file(dir / "t.tok", std::filesystem::file_size(dir / "t.tok") - 3);
    CHECK_THROWS_AS(load_precomputed_tokens(dir / "t.tok"), Error);
  }
}

TEST_CASE("descriptor files") {
  const auto dir = testutil::temp_dir("dsc");
  std::vector<DescriptorRecord> recs{{42, Eigen::Vector3d(0.25, 0.5, -1.0)}, {7, Eigen::Vector3d(1, 0, 0)}};
  save_descriptors(dir / "d.dsc", recs, 3);
  const auto back = load_descriptors(dir / "d.dsc");
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == 42);
  CHECK(back[0].vector == recs[0].vector);
  CHECK(back[1].id == 7);
}
