#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "voxseg/io.hpp"
#include "voxseg/synthetic.hpp"
#include "voxseg/volume.hpp"
#include "test_util.hpp"

using namespace voxseg;

namespace {

cli::SyntheticSpec small_spec() {
  cli::SyntheticSpec s;
  s.shape = {40, 40, 24};
  s.num_cases = 2;
  s.num_modalities = 2;
  s.lesions_per_case = 2;
  s.lesion_radius_min = 3.0;
  s.lesion_radius_max = 5.0;
  s.contrast = 0.6;
  s.noise_level = 0.04;
  s.seed = 17;
  return s;
}

}  // namespace

TEST_CASE("synthetic spec validation") {
  REQUIRE_NOTHROW(small_spec().validate());
  REQUIRE_NOTHROW(cli::SyntheticSpec{}.validate());

  auto s = small_spec();
  s.noise_level = s.contrast;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);

  s = small_spec();
  s.shape = {24, 24, 24};
  s.lesion_radius_max = 6.0;  // does not fit half of the 10.56-voxel semi-axis
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s.lesion_radius_min = s.lesion_radius_max = 3.0;
  REQUIRE_NOTHROW(s.validate());

  s = small_spec();
  s.num_cases = 0;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.num_modalities = 0;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.lesions_per_case = 0;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.lesion_radius_min = 6.0;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.lesion_radius_min = 0.5;
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.shape = {12, 40, 24};
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.spacing = {0.f, 1.f, 1.f};
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("gold mask equals the analytic sphere rasterization") {
  const auto spec = small_spec();
  const auto cases = cli::generate_synthetic_cases(spec);
  REQUIRE(cases.size() == 2);
  for (const auto& sc : cases) {
    REQUIRE(sc.lesions.size() == 2);
    Mask oracle(spec.shape, spec.spacing, 0);
    for (int x = 0; x < spec.shape[0]; ++x)
      for (int y = 0; y < spec.shape[1]; ++y)
        for (int z = 0; z < spec.shape[2]; ++z)
          for (const auto& l : sc.lesions) {
            const double dx = x - l.center[0], dy = y - l.center[1], dz = z - l.center[2];
            if (dx * dx + dy * dy + dz * dz <= l.radius * l.radius) oracle(x, y, z) = 1;
          }
    REQUIRE(*sc.data.gold == oracle);
    std::size_t n = 0;
    for (std::size_t v = 0; v < oracle.size(); ++v) n += oracle[v];
    REQUIRE(n > 0);
  }
}

TEST_CASE("zero noise separates lesion from background intensities") {
  auto spec = small_spec();
  spec.noise_level = 0.0;
  const auto cases = cli::generate_synthetic_cases(spec);
  for (const auto& sc : cases) {
    const Mask& gold = *sc.data.gold;
    for (int m = 0; m < spec.num_modalities; ++m) {
      const Volume& v = sc.data.modalities[m];
      float lesion_min = 1e30f, background_max = -1e30f;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (gold[i])
          lesion_min = std::min(lesion_min, v[i]);
        else if (v[i] != 0.f)
          background_max = std::max(background_max, v[i]);
      }
      REQUIRE(lesion_min > background_max);
    }
  }
}

TEST_CASE("air stays exactly zero and the foreground covers the gold") {
  const auto cases = cli::generate_synthetic_cases(small_spec());
  for (const auto& sc : cases) {
    const Mask fg = foreground_mask(sc.data);
    const Mask& gold = *sc.data.gold;
    std::size_t air = 0, support = 0;
    for (std::size_t v = 0; v < fg.size(); ++v) {
      if (gold[v]) REQUIRE(fg[v] == 1);
      if (fg[v] == 0) {
        ++air;
        for (const Volume& mod : sc.data.modalities) REQUIRE(mod[v] == 0.f);
      } else {
        ++support;
      }
    }
    REQUIRE(air > 0);
    REQUIRE(support > 0);
  }
}

TEST_CASE("background structure is mirror symmetric without noise") {
  auto spec = small_spec();
  spec.noise_level = 0.0;
  const auto cases = cli::generate_synthetic_cases(spec);
  const int X = spec.shape[0];
  for (const auto& sc : cases) {
    const Mask& gold = *sc.data.gold;
    for (const Volume& v : sc.data.modalities) {
      std::size_t compared = 0;
      for (int x = 0; x < X; ++x)
        for (int y = 0; y < spec.shape[1]; ++y)
          for (int z = 0; z < spec.shape[2]; ++z) {
            if (gold(x, y, z) || gold(X - 1 - x, y, z)) continue;
            if (v(x, y, z) != v(X - 1 - x, y, z)) ++compared;  // counts violations
          }
      REQUIRE(compared == 0);
    }
  }
}

TEST_CASE("lesions are confined to one hemisphere") {
  const auto spec = small_spec();
  const auto cases = cli::generate_synthetic_cases(spec);
  const double mid = (spec.shape[0] - 1) / 2.0;
  for (const auto& sc : cases) {
    const Mask& gold = *sc.data.gold;
    for (int x = 0; x < spec.shape[0]; ++x)
      for (int y = 0; y < spec.shape[1]; ++y)
        for (int z = 0; z < spec.shape[2]; ++z)
          if (gold(x, y, z)) REQUIRE(static_cast<double>(x) > mid);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  const auto spec = small_spec();
  const auto a = cli::generate_synthetic_cases(spec);
  const auto b = cli::generate_synthetic_cases(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].data.case_id == b[i].data.case_id);
    REQUIRE(*a[i].data.gold == *b[i].data.gold);
    for (std::size_t m = 0; m < a[i].data.modalities.size(); ++m)
      REQUIRE(a[i].data.modalities[m] == b[i].data.modalities[m]);
    for (std::size_t l = 0; l < a[i].lesions.size(); ++l) {
      REQUIRE(a[i].lesions[l].center == b[i].lesions[l].center);
      REQUIRE(a[i].lesions[l].radius == b[i].lesions[l].radius);
    }
  }

  auto other = spec;
  other.seed = 18;
  const auto c = cli::generate_synthetic_cases(other);
  REQUIRE(*a[0].data.gold != *c[0].data.gold);
}

TEST_CASE("written dataset reloads faithfully and byte-identically") {
  const auto spec = small_spec();
  vtest::TempDir tmp;
  const std::string dir_a = tmp.file("ds_a");
  const std::string dir_b = tmp.file("ds_b");
  const Manifest ma = cli::write_synthetic_dataset(spec, dir_a);
  cli::write_synthetic_dataset(spec, dir_b);

  REQUIRE(preflight_check(ma).empty());
  const Manifest loaded = load_manifest(dir_a + "/manifest.json");
  REQUIRE(loaded.cases.size() == 2);
  const auto reloaded = load_all_cases(loaded);
  const auto direct = cli::generate_synthetic_dataset(spec);
  for (std::size_t i = 0; i < direct.size(); ++i) {
    REQUIRE(reloaded[i].case_id == direct[i].case_id);
    REQUIRE(reloaded[i].modality_names == direct[i].modality_names);
    REQUIRE(*reloaded[i].gold == *direct[i].gold);
    for (std::size_t m = 0; m < direct[i].modalities.size(); ++m)
      REQUIRE(reloaded[i].modalities[m] == direct[i].modalities[m]);
  }

  const auto bytes_a = voxseg::detail::read_file_bytes(dir_a + "/case000/mod0.rvol");
  const auto bytes_b = voxseg::detail::read_file_bytes(dir_b + "/case000/mod0.rvol");
  REQUIRE(bytes_a == bytes_b);
  const auto gold_a = voxseg::detail::read_file_bytes(dir_a + "/case001/gold.rvol");
  const auto gold_b = voxseg::detail::read_file_bytes(dir_b + "/case001/gold.rvol");
  REQUIRE(gold_a == gold_b);
}

TEST_CASE("placement failure raises after bounded retries") {
  Rng rng(3);
  REQUIRE_THROWS_WITH(
      cli::detail::place_lesion(rng, {10.0, 10.0, 10.0}, {8.0, 8.0, 8.0}, 7.9, 7.9, "case 'x'"),
      Catch::Matchers::ContainsSubstring("after 100 attempts"));
}

TEST_CASE("synthetic spec round trips through json") {
  const auto spec = small_spec();
  const auto back = cli::SyntheticSpec::from_json(spec.to_json());
  REQUIRE(back == spec);

  REQUIRE_NOTHROW(cli::SyntheticSpec::from_json(nlohmann::json::object()));

  nlohmann::json bad = spec.to_json();
  bad["shape"] = "wide";
  REQUIRE_THROWS_AS(cli::SyntheticSpec::from_json(bad), ValidationError);
  nlohmann::json unlearnable = spec.to_json();
  unlearnable["noise_level"] = 1.0;
  REQUIRE_THROWS_AS(cli::SyntheticSpec::from_json(unlearnable), ValidationError);
}
