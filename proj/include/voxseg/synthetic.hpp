#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/io.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::cli {

// Sized so the default lesion radii fit one hemisphere of the default
// 64x64x32 phantom with margin. Intensities are arbitrary units with tissue
// around 1: contrast and noise_level are additive offsets on that scale.
struct SyntheticSpec {
  Index3 shape{64, 64, 32};
  Spacing3 spacing{1.f, 1.f, 1.f};
  int num_cases = 8;
  int num_modalities = 2;
  int lesions_per_case = 2;
  double lesion_radius_min = 4.0;
  double lesion_radius_max = 7.0;
  double contrast = 0.6;
  double noise_level = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSpec&) const = default;

  void validate() const {
    for (int a = 0; a < 3; ++a)
      if (shape[a] < 16) throw ValidationError("synthetic shape must be >= 16 on every axis");
    for (int a = 0; a < 3; ++a)
      if (!(spacing[a] > 0.f)) throw ValidationError("synthetic spacing must be > 0");
    if (num_cases < 1) throw ValidationError("num_cases must be >= 1");
    if (num_modalities < 1) throw ValidationError("num_modalities must be >= 1");
    if (lesions_per_case < 1) throw ValidationError("lesions_per_case must be >= 1");
    if (!(lesion_radius_min >= 1.0) || !(lesion_radius_max >= lesion_radius_min))
      throw ValidationError("lesion radii must satisfy 1 <= min <= max");
    if (!(contrast > 0.0) || !(noise_level >= 0.0) || !(contrast > noise_level))
      throw ValidationError("contrast must exceed the noise level");
    const std::array<double, 3> semi = head_semi_axes();
    if (lesion_radius_max + 2.0 > 0.5 * semi[0] || lesion_radius_max + 2.0 > semi[1] ||
        lesion_radius_max + 2.0 > semi[2])
      throw ValidationError("lesion_radius_max does not fit inside one phantom hemisphere");
  }

  std::array<double, 3> head_center() const {
    return {(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0};
  }

  std::array<double, 3> head_semi_axes() const {
    return {0.44 * shape[0], 0.44 * shape[1], 0.44 * shape[2]};
  }

  nlohmann::json to_json() const {
    return {{"shape", {shape[0], shape[1], shape[2]}},
            {"spacing", {spacing[0], spacing[1], spacing[2]}},
            {"num_cases", num_cases},
            {"num_modalities", num_modalities},
            {"lesions_per_case", lesions_per_case},
            {"lesion_radius_min", lesion_radius_min},
            {"lesion_radius_max", lesion_radius_max},
            {"contrast", contrast},
            {"noise_level", noise_level},
            {"seed", seed}};
  }

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    try {
      if (j.contains("shape"))
        s.shape = {j["shape"].at(0).get<int>(), j["shape"].at(1).get<int>(),
                   j["shape"].at(2).get<int>()};
      if (j.contains("spacing"))
        s.spacing = {j["spacing"].at(0).get<float>(), j["spacing"].at(1).get<float>(),
                     j["spacing"].at(2).get<float>()};
      if (j.contains("num_cases")) s.num_cases = j["num_cases"].get<int>();
      if (j.contains("num_modalities")) s.num_modalities = j["num_modalities"].get<int>();
      if (j.contains("lesions_per_case")) s.lesions_per_case = j["lesions_per_case"].get<int>();
      if (j.contains("lesion_radius_min")) s.lesion_radius_min = j["lesion_radius_min"].get<double>();
      if (j.contains("lesion_radius_max")) s.lesion_radius_max = j["lesion_radius_max"].get<double>();
      if (j.contains("contrast")) s.contrast = j["contrast"].get<double>();
      if (j.contains("noise_level")) s.noise_level = j["noise_level"].get<double>();
      if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed synthetic spec: ") + e.what());
    }
    s.validate();
    return s;
  }
};

struct SyntheticLesion {
  std::array<double, 3> center;
  double radius = 0.0;
};

struct SyntheticCase {
  MultiModalCase data;
  std::vector<SyntheticLesion> lesions;
};

namespace detail {

inline constexpr double kGradientAmplitude = 0.1;
inline constexpr double kVentricleDip = 0.3;
inline constexpr int kPlacementAttempts = 100;

inline double modality_base(int m) { return 1.0 + 0.25 * m; }
inline double lesion_gain(int m) { return 1.0 - 0.35 * (m % 2); }

inline double ellipsoid_rho2(const std::array<double, 3>& c, const std::array<double, 3>& semi,
                             double x, double y, double z) {
  const double dx = (x - c[0]) / semi[0];
  const double dy = (y - c[1]) / semi[1];
  const double dz = (z - c[2]) / semi[2];
  return dx * dx + dy * dy + dz * dz;
}

// Samples a sphere that lies inside the head ellipsoid and strictly within
// the x > center hemisphere. Throws after kPlacementAttempts rejections.
inline SyntheticLesion place_lesion(Rng& rng, const std::array<double, 3>& center,
                                    const std::array<double, 3>& semi, double r_min, double r_max,
                                    const std::string& context) {
  const double min_semi = std::min({semi[0], semi[1], semi[2]});
  for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
    SyntheticLesion l;
    l.radius = rng.uniform_real(r_min, r_max);
    const double lo_x = center[0] + l.radius + 1.0;
    const double hi_x = center[0] + semi[0] - l.radius;
    if (hi_x <= lo_x) continue;
    l.center[0] = rng.uniform_real(lo_x, hi_x);
    l.center[1] = rng.uniform_real(center[1] - semi[1] + l.radius, center[1] + semi[1] - l.radius);
    l.center[2] = rng.uniform_real(center[2] - semi[2] + l.radius, center[2] + semi[2] - l.radius);
    const double rho = std::sqrt(ellipsoid_rho2(center, semi, l.center[0], l.center[1], l.center[2]));
    if (rho + (l.radius + 1.0) / min_semi <= 1.0) return l;
  }
  throw Error(context + ": could not place a lesion after " +
              std::to_string(kPlacementAttempts) + " attempts");
}

}  // namespace detail

// Head phantom: ellipsoid support with a centre-bright radial gradient and
// two mirror-placed ventricle dips, all symmetric about the sagittal
// midplane. Hyperintense spherical lesions go in the x > centre hemisphere;
// the gold mask is their exact rasterization. Air stays exactly zero so the
// foreground convention holds; noise acts on support voxels only.
inline std::vector<SyntheticCase> generate_synthetic_cases(const SyntheticSpec& spec) {
  spec.validate();
  const std::array<double, 3> c = spec.head_center();
  const std::array<double, 3> semi = spec.head_semi_axes();
  const std::array<double, 3> vent_semi{0.08 * spec.shape[0], 0.22 * spec.shape[1],
                                        0.30 * spec.shape[2]};
  const double vent_offset = 0.18 * spec.shape[0];

  std::vector<SyntheticCase> out;
  for (int ci = 0; ci < spec.num_cases; ++ci) {
    SyntheticCase sc;
    char id[16];
    std::snprintf(id, sizeof id, "case%03d", ci);
    sc.data.case_id = id;
    Rng rng(Rng::mix(spec.seed, sc.data.case_id));

    for (int k = 0; k < spec.lesions_per_case; ++k)
      sc.lesions.push_back(detail::place_lesion(rng, c, semi, spec.lesion_radius_min,
                                                spec.lesion_radius_max,
                                                "case '" + sc.data.case_id + "'"));

    Mask gold(spec.shape, spec.spacing, 0);
    for (const SyntheticLesion& l : sc.lesions) {
      const double r2 = l.radius * l.radius;
      for (int x = static_cast<int>(std::floor(l.center[0] - l.radius));
           x <= static_cast<int>(std::ceil(l.center[0] + l.radius)); ++x)
        for (int y = static_cast<int>(std::floor(l.center[1] - l.radius));
             y <= static_cast<int>(std::ceil(l.center[1] + l.radius)); ++y)
          for (int z = static_cast<int>(std::floor(l.center[2] - l.radius));
               z <= static_cast<int>(std::ceil(l.center[2] + l.radius)); ++z) {
            if (!gold.contains(x, y, z)) continue;
            const double dx = x - l.center[0], dy = y - l.center[1], dz = z - l.center[2];
            if (dx * dx + dy * dy + dz * dz <= r2) gold(x, y, z) = 1;
          }
    }

    for (int m = 0; m < spec.num_modalities; ++m) {
      const double base = detail::modality_base(m);
      const double lesion_value = base + detail::kGradientAmplitude +
                                  spec.contrast * detail::lesion_gain(m);
      Volume v(spec.shape, spec.spacing, 0.f);
      for (int x = 0; x < spec.shape[0]; ++x)
        for (int y = 0; y < spec.shape[1]; ++y)
          for (int z = 0; z < spec.shape[2]; ++z) {
            const double rho2 = detail::ellipsoid_rho2(c, semi, x, y, z);
            if (rho2 > 1.0) continue;
            double value = base + detail::kGradientAmplitude * (1.0 - rho2);
            // folding |x - c| paints both mirror ventricles and keeps the
            // background bit-exactly symmetric about the midplane
            const double xm = std::abs(x - c[0]);
            const std::array<double, 3> vc{vent_offset, c[1], c[2]};
            if (detail::ellipsoid_rho2(vc, vent_semi, xm, y, z) <= 1.0)
              value -= detail::kVentricleDip;
            if (gold(x, y, z)) value = lesion_value;
            if (spec.noise_level > 0.0) value += rng.normal(0.0, spec.noise_level);
            v(x, y, z) = static_cast<float>(std::max(1.0, value));
          }
      sc.data.modality_names.push_back("mod" + std::to_string(m));
      sc.data.modalities.push_back(std::move(v));
    }
    sc.data.gold = std::move(gold);
    sc.data.validate();
    out.push_back(std::move(sc));
  }
  return out;
}

inline std::vector<MultiModalCase> generate_synthetic_dataset(const SyntheticSpec& spec) {
  std::vector<MultiModalCase> out;
  for (SyntheticCase& sc : generate_synthetic_cases(spec)) out.push_back(std::move(sc.data));
  return out;
}

// Writes <out_dir>/<case_id>/<modality>.rvol volumes, gold masks, and
// <out_dir>/manifest.json with relative paths.
inline Manifest write_synthetic_dataset(const SyntheticSpec& spec, const std::string& out_dir) {
  const auto cases = generate_synthetic_dataset(spec);
  std::filesystem::create_directories(out_dir);
  Manifest m;
  m.root = std::filesystem::absolute(out_dir);
  for (const MultiModalCase& c : cases) {
    const std::filesystem::path case_dir = std::filesystem::path(out_dir) / c.case_id;
    std::filesystem::create_directories(case_dir);
    CaseEntry e;
    e.case_id = c.case_id;
    for (std::size_t i = 0; i < c.modalities.size(); ++i) {
      const std::string rel = c.case_id + "/" + c.modality_names[i] + ".rvol";
      save_volume(c.modalities[i], (std::filesystem::path(out_dir) / rel).string());
      e.modalities.push_back({c.modality_names[i], rel});
    }
    const std::string gold_rel = c.case_id + "/gold.rvol";
    save_mask(*c.gold, (std::filesystem::path(out_dir) / gold_rel).string());
    e.gold = gold_rel;
    m.cases.push_back(std::move(e));
  }
  save_manifest(m, (std::filesystem::path(out_dir) / "manifest.json").string());
  return m;
}

}  // namespace voxseg::cli
