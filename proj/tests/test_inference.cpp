#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <vector>

#include "voxseg/inference.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/rng.hpp"
#include "test_util.hpp"

using namespace voxseg;

namespace {

// all-zero weights turn the head bias into a constant logit pair, so the
// network emits softmax(log(1-p), log(p)) = (1-p, p) everywhere
model::Network<float> constant_net(float lesion_prob, int in_channels) {
  model::NetworkConfig cfg;
  cfg.in_channels = in_channels;
  cfg.num_classes = 2;
  cfg.base_filters = 2;
  cfg.resolution_steps = 2;
  cfg.dropout_rate = 0.f;
  Rng rng(7);
  model::Network<float> net(cfg, rng);
  auto& th = net.parameters();
  std::fill(th.begin(), th.end(), 0.f);
  for (const auto& ref : net.manifest())
    if (ref.path == "head/conv/bias") {
      th[ref.offset] = std::log(1.f - lesion_prob);
      th[ref.offset + 1] = std::log(lesion_prob);
    }
  return net;
}

model::Network<float> random_net(int in_channels, std::uint64_t seed) {
  model::NetworkConfig cfg;
  cfg.in_channels = in_channels;
  cfg.num_classes = 2;
  cfg.base_filters = 2;
  cfg.resolution_steps = 2;
  cfg.dropout_rate = 0.f;
  Rng rng(seed);
  return model::Network<float>(cfg, rng);
}

MultiModalCase make_case(Index3 shape, int n_mod, std::uint64_t seed) {
  MultiModalCase c;
  c.case_id = "case";
  Rng rng(seed);
  for (int m = 0; m < n_mod; ++m) {
    c.modality_names.push_back("mod" + std::to_string(m));
    Volume v(shape, {1.f, 1.f, 1.f});
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<float>(rng.uniform_real(-1.0, 1.0));
    c.modalities.push_back(std::move(v));
  }
  return c;
}

// hand-assembled two-class map with full unit coverage
inference::ProbabilityMap make_map(Index3 shape, const std::vector<float>& lesion_prob) {
  inference::ProbabilityMap map;
  map.probabilities = Tensor4<float>(2, shape);
  map.coverage = Grid3<int>(shape, {1.f, 1.f, 1.f}, 1);
  REQUIRE(lesion_prob.size() == map.coverage.size());
  for (std::size_t v = 0; v < lesion_prob.size(); ++v) {
    map.probabilities.channel(1)[v] = lesion_prob[v];
    map.probabilities.channel(0)[v] = 1.f - lesion_prob[v];
  }
  return map;
}

// independent 26-connectivity oracle built on union-find
struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

TEST_CASE("axis origins cover the lattice plus a clamped tail") {
  using inference::detail::axis_origins;
  REQUIRE(axis_origins(12, 8, 2) == std::vector<int>{0, 2, 4});
  REQUIRE(axis_origins(13, 8, 2) == std::vector<int>{0, 2, 4, 5});
  REQUIRE(axis_origins(8, 8, 3) == std::vector<int>{0});
  REQUIRE(axis_origins(10, 8, 4) == std::vector<int>{0, 2});
  REQUIRE(axis_origins(24, 8, 8) == std::vector<int>{0, 8, 16});
}

TEST_CASE("a constant network yields a constant probability map") {
  const auto net = constant_net(0.7f, 1);
  const auto mcase = make_case({13, 12, 9}, 1, 3);
  inference::InferenceConfig cfg;
  cfg.patch_size = {8, 8, 4};
  cfg.extraction_step = {2, 2, 1};
  const auto map = inference::predict_volume<float>({&net}, mcase, cfg);

  REQUIRE(map.shape() == Index3{13, 12, 9});
  for (std::size_t v = 0; v < map.coverage.size(); ++v) {
    REQUIRE(map.coverage[v] >= 1);
    REQUIRE(map.probabilities.channel(0)[v] == Catch::Approx(0.3).margin(1e-5));
    REQUIRE(map.probabilities.channel(1)[v] == Catch::Approx(0.7).margin(1e-5));
  }
}

TEST_CASE("two constant networks average to the ensemble mean") {
  const auto a = constant_net(0.2f, 1);
  const auto b = constant_net(0.8f, 1);
  const auto mcase = make_case({10, 10, 8}, 1, 4);
  inference::InferenceConfig cfg;
  cfg.patch_size = {8, 8, 4};
  cfg.extraction_step = {4, 4, 2};
  const auto map = inference::predict_volume<float>({&a, &b}, mcase, cfg);
  for (std::size_t v = 0; v < map.coverage.size(); ++v) {
    REQUIRE(map.probabilities.channel(0)[v] == Catch::Approx(0.5).margin(1e-5));
    REQUIRE(map.probabilities.channel(1)[v] == Catch::Approx(0.5).margin(1e-5));
  }
}

TEST_CASE("duplicating the ensemble leaves the map unchanged") {
  const auto net = random_net(1, 11);
  const auto mcase = make_case({12, 12, 8}, 1, 5);
  inference::InferenceConfig cfg;
  cfg.patch_size = {8, 8, 4};
  cfg.extraction_step = {3, 3, 2};
  const auto one = inference::predict_volume<float>({&net}, mcase, cfg);
  const auto two = inference::predict_volume<float>({&net, &net}, mcase, cfg);
  REQUIRE(one.coverage == two.coverage);
  for (std::size_t i = 0; i < one.probabilities.size(); ++i)
    REQUIRE(one.probabilities.data()[i] == Catch::Approx(two.probabilities.data()[i]).margin(1e-6));
}

TEST_CASE("probabilities sum to one and coverage matches the lattice count") {
  const auto net = random_net(1, 21);
  const auto mcase = make_case({48, 48, 32}, 1, 6);
  inference::InferenceConfig cfg;  // defaults: patch (24,24,16), step (4,4,1)
  const auto map = inference::predict_volume<float>({&net}, mcase, cfg);

  // an interior voxel is covered by (24/4)*(24/4)*(16/1) windows
  REQUIRE(map.coverage(24, 24, 16) == 576);
  for (std::size_t v = 0; v < map.coverage.size(); ++v) {
    REQUIRE(map.coverage[v] >= 1);
    const double sum = static_cast<double>(map.probabilities.channel(0)[v]) +
                       static_cast<double>(map.probabilities.channel(1)[v]);
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("predict_volume validates its inputs") {
  const auto net = random_net(1, 31);
  const auto mcase2 = make_case({12, 12, 8}, 2, 7);
  inference::InferenceConfig cfg;
  cfg.patch_size = {8, 8, 4};
  cfg.extraction_step = {4, 4, 2};
  REQUIRE_THROWS_AS(inference::predict_volume<float>({&net}, mcase2, cfg), ValidationError);
  REQUIRE_THROWS_AS(inference::predict_volume<float>({}, mcase2, cfg), ValidationError);
  REQUIRE_THROWS_AS(inference::predict_volume<float>({&net, nullptr}, make_case({12, 12, 8}, 1, 7), cfg),
                    ValidationError);
  REQUIRE_THROWS_AS(inference::predict_volume<float>({&net}, make_case({6, 12, 8}, 1, 7), cfg),
                    ValidationError);

  inference::InferenceConfig bad = cfg;
  bad.extraction_step = {0, 4, 2};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.extraction_step = {9, 4, 2};
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.batch_size = 0;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("probability maps round trip through the cache") {
  const auto net = random_net(1, 41);
  const auto mcase = make_case({12, 12, 8}, 1, 8);
  inference::InferenceConfig cfg;
  cfg.patch_size = {8, 8, 4};
  cfg.extraction_step = {4, 4, 2};
  const auto map = inference::predict_volume<float>({&net}, mcase, cfg);

  vtest::TempDir tmp;
  const auto base = tmp.file("map");
  inference::save_probability_map(map, base);
  const auto back = inference::load_probability_map(base);
  REQUIRE(back.coverage == map.coverage);
  REQUIRE(back.probabilities.channels() == map.probabilities.channels());
  for (std::size_t i = 0; i < map.probabilities.size(); ++i)
    REQUIRE(back.probabilities.data()[i] == map.probabilities.data()[i]);

  {
    std::ofstream f(base + ".bin", std::ios::binary | std::ios::trunc);
    f << "short";
  }
  REQUIRE_THROWS_AS(inference::load_probability_map(base), IoError);
  const auto garbled = tmp.file("garbled");
  {
    std::ofstream f(garbled + ".json");
    f << "not json";
  }
  REQUIRE_THROWS_AS(inference::load_probability_map(garbled), IoError);
}

TEST_CASE("diagonal voxels join under 26-connectivity") {
  Mask m({4, 4, 4}, {1.f, 1.f, 1.f});
  m(0, 0, 0) = 1;
  m(1, 1, 1) = 1;
  auto cc = inference::connected_components(m);
  REQUIRE(cc.sizes == std::vector<std::size_t>{2});
  REQUIRE(cc.labels(0, 0, 0) == 1);
  REQUIRE(cc.labels(1, 1, 1) == 1);

  m(3, 3, 3) = 1;
  cc = inference::connected_components(m);
  REQUIRE(cc.sizes == std::vector<std::size_t>{2, 1});
  REQUIRE(cc.labels(3, 3, 3) == 2);

  const Mask empty({4, 4, 4}, {1.f, 1.f, 1.f});
  REQUIRE(inference::connected_components(empty).sizes.empty());
}

TEST_CASE("component labels match a union-find oracle on random masks") {
  Rng rng(73);
  for (int trial = 0; trial < 8; ++trial) {
    Mask m({8, 8, 8}, {1.f, 1.f, 1.f});
    const double density = 0.1 + 0.1 * trial;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(density) ? 1 : 0;

    const auto cc = inference::connected_components(m);
    UnionFind uf(m.size());
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y)
        for (int z = 0; z < 8; ++z) {
          if (!m(x, y, z)) continue;
          for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dz = -1; dz <= 1; ++dz) {
                const int nx = x + dx, ny = y + dy, nz = z + dz;
                if ((dx | dy | dz) == 0 || !m.contains(nx, ny, nz) || !m(nx, ny, nz)) continue;
                uf.unite(m.flat(x, y, z), m.flat(nx, ny, nz));
              }
        }

    std::map<std::size_t, int> root_to_label;
    std::map<int, std::size_t> label_size;
    for (std::size_t v = 0; v < m.size(); ++v) {
      if (!m[v]) {
        REQUIRE(cc.labels[v] == 0);
        continue;
      }
      REQUIRE(cc.labels[v] >= 1);
      const std::size_t root = uf.find(v);
      const auto it = root_to_label.emplace(root, cc.labels[v]).first;
      REQUIRE(it->second == cc.labels[v]);
      ++label_size[cc.labels[v]];
    }
    REQUIRE(root_to_label.size() == cc.sizes.size());
    for (const auto& [label, size] : label_size)
      REQUIRE(cc.sizes[static_cast<std::size_t>(label) - 1] == size);
  }
}

TEST_CASE("binarize thresholds then filters small components") {
  const Index3 sh{12, 10, 6};
  std::vector<float> p(12 * 10 * 6, 0.f);
  auto at = [&](int x, int y, int z) -> float& {
    return p[(static_cast<std::size_t>(x) * 10 + y) * 6 + z];
  };

  SECTION("all probabilities below the threshold give an empty mask") {
    for (auto& v : p) v = 0.4f;
    const auto map = make_map(sh, p);
    const Mask m = inference::binarize(map, {0.5, 0});
    for (std::size_t v = 0; v < m.size(); ++v) REQUIRE(m[v] == 0);
  }

  SECTION("a 150-voxel component vanishes at min size 200") {
    int placed = 0;
    for (int x = 0; x < 10 && placed < 150; ++x)
      for (int y = 0; y < 5 && placed < 150; ++y)
        for (int z = 0; z < 3 && placed < 150; ++z) {
          at(x, y, z) = 0.9f;
          ++placed;
        }
    REQUIRE(placed == 150);
    const auto map = make_map(sh, p);
    const Mask kept = inference::binarize(map, {0.5, 150});
    const Mask dropped = inference::binarize(map, {0.5, 200});
    std::size_t nk = 0, nd = 0;
    for (std::size_t v = 0; v < kept.size(); ++v) {
      nk += kept[v];
      nd += dropped[v];
    }
    REQUIRE(nk == 150);
    REQUIRE(nd == 0);
  }

  SECTION("size filtering keeps only components above the cut") {
    // 300-voxel slab and a separated 50-voxel slab
    for (int x = 0; x < 10; ++x)
      for (int y = 0; y < 5; ++y)
        for (int z = 0; z < 6; ++z) at(x, y, z) = 0.8f;
    for (int x = 0; x < 5; ++x)
      for (int y = 8; y < 10; ++y)
        for (int z = 0; z < 5; ++z) at(x, y, z) = 0.8f;
    const auto map = make_map(sh, p);
    const auto cc = inference::connected_components(inference::binarize(map, {0.5, 0}));
    REQUIRE(cc.sizes == std::vector<std::size_t>{300, 50});
    const Mask m = inference::binarize(map, {0.5, 200});
    std::size_t n = 0;
    bool slab_only = true;
    for (int x = 0; x < 12; ++x)
      for (int y = 0; y < 10; ++y)
        for (int z = 0; z < 6; ++z) {
          n += m(x, y, z);
          if (m(x, y, z) && y >= 5) slab_only = false;
        }
    REQUIRE(n == 300);
    REQUIRE(slab_only);
  }
}

TEST_CASE("binarize is monotone in threshold and min size") {
  Rng rng(91);
  const Index3 sh{10, 10, 8};
  std::vector<float> p(10 * 10 * 8);
  for (auto& v : p) v = static_cast<float>(rng.uniform_real(0.0, 1.0));
  const auto map = make_map(sh, p);

  const Mask lo = inference::binarize(map, {0.3, 0});
  const Mask hi = inference::binarize(map, {0.7, 0});
  for (std::size_t v = 0; v < lo.size(); ++v)
    if (hi[v]) REQUIRE(lo[v] == 1);

  const Mask s10 = inference::binarize(map, {0.3, 10});
  const Mask s40 = inference::binarize(map, {0.3, 40});
  for (std::size_t v = 0; v < lo.size(); ++v) {
    if (s10[v]) REQUIRE(lo[v] == 1);
    if (s40[v]) REQUIRE(s10[v] == 1);
  }
}

TEST_CASE("combined score matches hand evaluations") {
  const inference::ScoreConfig sc;
  REQUIRE(inference::combined_score(1.0, 0.0, sc) == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(inference::combined_score(0.0, 10.0, sc) == 0.0);
  REQUIRE(inference::combined_score(0.0, 200.0, sc) == 0.0);
  REQUIRE(inference::combined_score(0.71, 29.5, sc) == Catch::Approx(0.3874).margin(5e-5));
  // equal overlap and border terms v give v/2
  REQUIRE(inference::combined_score(0.6, 80.0, sc) == Catch::Approx(0.3).margin(1e-12));
  // hd beyond hd_max clamps to a zero border term
  REQUIRE(inference::combined_score(0.9, 500.0, sc) == 0.0);

  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    const double s =
        inference::combined_score(rng.uniform_real(0.0, 1.0), rng.uniform_real(0.0, 250.0), sc);
    REQUIRE(s >= 0.0);
    REQUIRE(s <= 0.5);
  }

  REQUIRE_THROWS_AS(inference::combined_score(-0.1, 0.0, sc), ValidationError);
  REQUIRE_THROWS_AS(inference::combined_score(1.1, 0.0, sc), ValidationError);
  REQUIRE_THROWS_AS(inference::combined_score(0.5, -1.0, sc), ValidationError);
  REQUIRE_THROWS_AS(inference::combined_score(0.5, 1.0, inference::ScoreConfig{0.0}),
                    ValidationError);
}

TEST_CASE("default parameter grid matches the documented ranges") {
  const auto g = inference::ParamGrid::defaults();
  REQUIRE(g.thresholds.size() == 9);
  REQUIRE(g.thresholds.front() == Catch::Approx(0.1));
  REQUIRE(g.thresholds.back() == Catch::Approx(0.9));
  REQUIRE(g.min_sizes.size() == 20);
  REQUIRE(g.min_sizes.front() == 10);
  REQUIRE(g.min_sizes[9] == 100);
  REQUIRE(g.min_sizes[10] == 150);
  REQUIRE(g.min_sizes.back() == 1000);
}

TEST_CASE("grid search returns the unique optimum") {
  const Index3 sh{16, 12, 6};
  std::vector<float> p(16 * 12 * 6, 0.f);
  Mask gold(sh, {1.f, 1.f, 1.f});
  auto at = [&](int x, int y, int z) -> float& {
    return p[(static_cast<std::size_t>(x) * 12 + y) * 6 + z];
  };
  // 40-voxel gold blob predicted at 0.45, 20-voxel decoy at 0.9
  int blob = 0;
  for (int x = 0; x < 5 && blob < 40; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 2 && blob < 40; ++z) {
        at(x, y, z) = 0.45f;
        gold(x, y, z) = 1;
        ++blob;
      }
  int decoy = 0;
  for (int x = 10; x < 15 && decoy < 20; ++x)
    for (int y = 8; y < 12 && decoy < 20; ++y) {
      at(x, y, 4) = 0.9f;
      ++decoy;
    }
  REQUIRE(blob == 40);
  REQUIRE(decoy == 20);

  inference::ParamGrid grid;
  grid.thresholds = {0.4, 0.8};
  grid.min_sizes = {30, 100};
  const auto res =
      inference::grid_search({make_map(sh, p)}, {gold}, grid, inference::ScoreConfig{});
  REQUIRE(res.params.threshold == 0.4);
  REQUIRE(res.params.min_lesion_size == 30);
  REQUIRE(res.score == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(res.table.size() == 4);
  for (const auto& cell : res.table)
    if (cell.threshold != 0.4 || cell.min_size != 30) REQUIRE(cell.mean_score == 0.0);
}

TEST_CASE("grid search matches a brute-force rescan") {
  Rng rng(133);
  const Index3 sh{12, 10, 8};
  std::vector<inference::ProbabilityMap> maps;
  std::vector<Mask> golds;
  for (int c = 0; c < 3; ++c) {
    std::vector<float> p(12 * 10 * 8);
    for (auto& v : p) v = static_cast<float>(rng.uniform_real(0.0, 1.0));
    maps.push_back(make_map(sh, p));
    Mask g(sh, {1.f, 1.f, 1.f});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.bernoulli(0.3) ? 1 : 0;
    golds.push_back(std::move(g));
  }

  inference::ParamGrid grid;
  grid.thresholds = {0.2, 0.4, 0.6, 0.8};
  grid.min_sizes = {1, 3, 8, 20};
  const inference::ScoreConfig sc;
  const auto res = inference::grid_search(maps, golds, grid, sc);

  double best = -1.0;
  inference::PostprocessParams best_p;
  for (const double th : grid.thresholds)
    for (const std::size_t s : grid.min_sizes) {
      double sum = 0.0;
      for (std::size_t c = 0; c < maps.size(); ++c) {
        const Mask pred = inference::binarize(maps[c], {th, s});
        const double d = metrics::dsc(pred, golds[c]);
        const auto h = metrics::hausdorff(pred, golds[c]);
        sum += inference::combined_score(d, h.defined ? h.distance : sc.hd_max, sc);
      }
      const double mean = sum / static_cast<double>(maps.size());
      const bool better = mean > best || (mean == best && (s < best_p.min_lesion_size ||
                                                           (s == best_p.min_lesion_size &&
                                                            th > best_p.threshold)));
      if (best < 0.0 || better) {
        best = mean;
        best_p = {th, s};
      }
      bool found = false;
      for (const auto& cell : res.table)
        if (cell.threshold == th && cell.min_size == s) {
          REQUIRE(cell.mean_score == Catch::Approx(mean).margin(1e-12));
          found = true;
        }
      REQUIRE(found);
    }
  REQUIRE(res.params.threshold == best_p.threshold);
  REQUIRE(res.params.min_lesion_size == best_p.min_lesion_size);
  REQUIRE(res.score == Catch::Approx(best).margin(1e-12));
}

TEST_CASE("grid search ties break toward smaller size then larger threshold") {
  const Index3 sh{8, 8, 4};
  std::vector<float> p(8 * 8 * 4, 0.f);  // nothing ever crosses a threshold
  Mask gold(sh, {1.f, 1.f, 1.f});
  gold(2, 2, 2) = 1;

  inference::ParamGrid grid;
  grid.thresholds = {0.3, 0.6};
  grid.min_sizes = {50, 10};
  const auto res =
      inference::grid_search({make_map(sh, p)}, {gold}, grid, inference::ScoreConfig{});
  REQUIRE(res.score == 0.0);
  REQUIRE(res.params.min_lesion_size == 10);
  REQUIRE(res.params.threshold == 0.6);
}

TEST_CASE("grid search validates its inputs") {
  const Index3 sh{8, 8, 4};
  const auto map = make_map(sh, std::vector<float>(8 * 8 * 4, 0.2f));
  const Mask gold(sh, {1.f, 1.f, 1.f});
  const Mask wrong({8, 8, 6}, {1.f, 1.f, 1.f});
  const inference::ScoreConfig sc;
  auto grid = inference::ParamGrid::defaults();

  REQUIRE_THROWS_AS(inference::grid_search({}, {}, grid, sc), ValidationError);
  REQUIRE_THROWS_AS(inference::grid_search({map}, {gold, gold}, grid, sc), ValidationError);
  REQUIRE_THROWS_AS(inference::grid_search({map}, {wrong}, grid, sc), ValidationError);
  inference::ParamGrid empty;
  REQUIRE_THROWS_AS(inference::grid_search({map}, {gold}, empty, sc), ValidationError);
  inference::ParamGrid bad;
  bad.thresholds = {0.0};
  bad.min_sizes = {10};
  REQUIRE_THROWS_AS(inference::grid_search({map}, {gold}, bad, sc), ValidationError);
}

TEST_CASE("postprocess params round trip through json and validate") {
  inference::PostprocessParams p{0.35, 120};
  const auto j = p.to_json();
  REQUIRE(j.at("connectivity") == 26);
  const auto back = inference::PostprocessParams::from_json(j);
  REQUIRE(back == p);

  auto j6 = j;
  j6["connectivity"] = 6;
  REQUIRE_THROWS_AS(inference::PostprocessParams::from_json(j6), ValidationError);
  REQUIRE_THROWS_AS((inference::PostprocessParams{0.0, 10}).validate(), ValidationError);
  REQUIRE_THROWS_AS((inference::PostprocessParams{1.0, 10}).validate(), ValidationError);
}
