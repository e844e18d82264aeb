#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/io.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/training.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::sampling {

enum class Augmentation : int {
  none = 0,
  sagittal_reflect = 1,
  rot90 = 2,
  rot180 = 3,
  rot270 = 4,
  sagittal_reflect_combined = 5,
};

inline constexpr int kAugmentationCount = 6;

inline std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::sagittal_reflect: return "sagittal-reflect";
    case Augmentation::rot90: return "rot90";
    case Augmentation::rot180: return "rot180";
    case Augmentation::rot270: return "rot270";
    case Augmentation::sagittal_reflect_combined: return "sagittal-reflect-combined";
  }
  throw ValidationError("unknown augmentation value");
}

inline Augmentation augmentation_from_string(const std::string& s) {
  for (int i = 0; i < kAugmentationCount; ++i)
    if (to_string(static_cast<Augmentation>(i)) == s) return static_cast<Augmentation>(i);
  throw ValidationError("unknown augmentation '" + s + "'");
}

enum class ClassLabel : int { healthy = 0, lesion = 1 };

inline std::string to_string(ClassLabel c) { return c == ClassLabel::lesion ? "lesion" : "healthy"; }

struct SamplerConfig {
  Index3 patch_size{24, 24, 16};
  int goal_per_case = 10000;
  double lesion_fraction = 0.5;
  Index3 max_offset{12, 12, 8};
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (patch_size[a] < 2 || patch_size[a] % 2 != 0)
        throw ValidationError("patch_size components must be even and >= 2, got " + index_to_string(patch_size));
      if (max_offset[a] < 0 || max_offset[a] > patch_size[a] / 2)
        throw ValidationError("max_offset must be within [0, patch_size/2] per axis, got " +
                              index_to_string(max_offset));
    }
    if (goal_per_case < 1) throw ValidationError("goal_per_case must be >= 1");
    if (!(lesion_fraction > 0.0 && lesion_fraction < 1.0))
      throw ValidationError("lesion_fraction must be in (0, 1), got " + std::to_string(lesion_fraction));
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw ValidationError("validation_fraction must be in [0, 1), got " +
                            std::to_string(validation_fraction));
  }
};

// A planned patch: window of patch_size voxels centered at `center`
// ([center - patch/2, center + patch/2) per axis). `source` is the voxel the
// spec was sampled from; for lesion specs it always lies inside the window.
struct PatchSpec {
  std::string case_id;
  Index3 center{0, 0, 0};
  Index3 source{0, 0, 0};
  ClassLabel label = ClassLabel::healthy;
  Augmentation augmentation = Augmentation::none;

  bool operator==(const PatchSpec&) const = default;
};

struct PatchSet {
  std::vector<training::Sample<float>> training;
  std::vector<training::Sample<float>> validation;
  std::vector<PatchSpec> training_specs;
  std::vector<PatchSpec> validation_specs;
};

namespace detail {

inline bool window_fits(const Index3& center, const Index3& patch, const Index3& shape) {
  for (int a = 0; a < 3; ++a) {
    const int h = patch[a] / 2;
    if (center[a] - h < 0 || center[a] + h > shape[a]) return false;
  }
  return true;
}

}  // namespace detail

// Spatial transform of a channels-first patch. Axial rotations act in the
// x-y plane; 90 and 270 degrees require a square x-y footprint.
template <typename T>
Tensor4<T> augmented(const Tensor4<T>& t, Augmentation op) {
  const Index3 sp = t.spatial();
  const int X = sp[0], Y = sp[1], Z = sp[2];
  if ((op == Augmentation::rot90 || op == Augmentation::rot270) && X != Y)
    throw ValidationError("axial 90/270 rotation requires a square x-y footprint, got " + index_to_string(sp));
  if (op == Augmentation::none) return t;
  Tensor4<T> out(t.channels(), sp);
  for (int c = 0; c < t.channels(); ++c)
    for (int x = 0; x < X; ++x)
      for (int y = 0; y < Y; ++y)
        for (int z = 0; z < Z; ++z) {
          T v;
          switch (op) {
            case Augmentation::sagittal_reflect: v = t(c, X - 1 - x, y, z); break;
            case Augmentation::rot90: v = t(c, y, X - 1 - x, z); break;
            case Augmentation::rot180: v = t(c, X - 1 - x, Y - 1 - y, z); break;
            case Augmentation::rot270: v = t(c, Y - 1 - y, x, z); break;
            case Augmentation::sagittal_reflect_combined: v = t(c, x, Y - 1 - y, z); break;
            default: throw ValidationError("unknown augmentation value");
          }
          out(c, x, y, z) = v;
        }
  return out;
}

template <typename T>
void augment_patch(Tensor4<T>& patch, Tensor4<T>& target, Augmentation op) {
  if (op == Augmentation::none) return;
  patch = augmented(patch, op);
  target = augmented(target, op);
}

// Plans goal_per_case patches for one case: round(lesion_fraction * goal)
// centered near lesion voxels with jittered offsets, the remainder on healthy
// tissue at regular spatial steps. Lesion voxels are shuffled and cycled when
// the lesion is small; repeat visits to a voxel walk through the six
// augmentations so oversampled voxels still yield distinct patches.
inline std::vector<PatchSpec> sample_centers(const MultiModalCase& mcase, const SamplerConfig& config,
                                             Rng& rng) {
  config.validate();
  mcase.validate();
  if (!mcase.gold.has_value())
    throw ValidationError("case '" + mcase.case_id + "' has no gold standard mask; cannot sample patches");
  const Mask& gold = *mcase.gold;
  const Index3 shape = gold.shape();
  const Index3 patch = config.patch_size;
  for (int a = 0; a < 3; ++a)
    if (shape[a] < patch[a])
      throw ValidationError("case '" + mcase.case_id + "' volume " + index_to_string(shape) +
                            " is smaller than the patch size " + index_to_string(patch));

  std::vector<Index3> lesion_voxels;
  for (int x = 0; x < shape[0]; ++x)
    for (int y = 0; y < shape[1]; ++y)
      for (int z = 0; z < shape[2]; ++z)
        if (gold(x, y, z) != 0) lesion_voxels.push_back({x, y, z});
  if (lesion_voxels.empty())
    throw ValidationError("case '" + mcase.case_id + "' gold standard contains no lesion voxels");

  const int lesion_n = static_cast<int>(std::lround(config.lesion_fraction * config.goal_per_case));
  const int healthy_n = config.goal_per_case - lesion_n;

  std::vector<PatchSpec> specs;
  specs.reserve(static_cast<std::size_t>(config.goal_per_case));

  rng.shuffle(lesion_voxels.begin(), lesion_voxels.end());
  std::vector<int> first_op(lesion_voxels.size(), -1);
  for (int t = 0; t < lesion_n; ++t) {
    const std::size_t i = static_cast<std::size_t>(t) % lesion_voxels.size();
    const int cycle = t / static_cast<int>(lesion_voxels.size());
    if (first_op[i] < 0) first_op[i] = static_cast<int>(rng.uniform_int(0, kAugmentationCount - 1));
    const Index3 v = lesion_voxels[i];
    PatchSpec s;
    s.case_id = mcase.case_id;
    s.source = v;
    s.label = ClassLabel::lesion;
    s.augmentation = static_cast<Augmentation>((first_op[i] + cycle) % kAugmentationCount);
    for (int a = 0; a < 3; ++a) {
      const int h = patch[a] / 2;
      const int off = static_cast<int>(rng.uniform_int(-config.max_offset[a], config.max_offset[a]));
      const int lo = std::max(h, v[a] - h + 1);
      const int hi = std::min(shape[a] - h, v[a] + h);
      s.center[a] = std::clamp(v[a] + off, lo, hi);
    }
    specs.push_back(std::move(s));
  }

  // healthy support: foreground tissue that is not lesion
  const Mask fg = foreground_mask(mcase);
  Index3 blo = shape, bhi{-1, -1, -1};
  for (int x = 0; x < shape[0]; ++x)
    for (int y = 0; y < shape[1]; ++y)
      for (int z = 0; z < shape[2]; ++z)
        if (fg(x, y, z) != 0 && gold(x, y, z) == 0) {
          const Index3 v{x, y, z};
          for (int a = 0; a < 3; ++a) {
            blo[a] = std::min(blo[a], v[a]);
            bhi[a] = std::max(bhi[a], v[a]);
          }
        }
  if (bhi[0] < 0)
    throw ValidationError("case '" + mcase.case_id + "' has no healthy foreground voxels");

  Index3 step;
  const double target_per_axis = std::cbrt(static_cast<double>(std::max(1, healthy_n)));
  for (int a = 0; a < 3; ++a) {
    const int extent = bhi[a] - blo[a] + 1;
    step[a] = std::max(1, static_cast<int>(std::floor(extent / target_per_axis)));
  }

  std::vector<Index3> chosen;
  std::unordered_set<std::size_t> seen;
  const long phase_cap = std::min<long>(4096, static_cast<long>(step[0]) * step[1] * step[2]);
  for (long pass = 0; static_cast<int>(chosen.size()) < healthy_n && pass < phase_cap; ++pass) {
    for (int x = blo[0] + static_cast<int>(pass) % step[0]; x <= bhi[0]; x += step[0])
      for (int y = blo[1] + static_cast<int>(pass) % step[1]; y <= bhi[1]; y += step[1])
        for (int z = blo[2] + static_cast<int>(pass) % step[2]; z <= bhi[2]; z += step[2]) {
          if (static_cast<int>(chosen.size()) >= healthy_n) break;
          const Index3 v{x, y, z};
          if (fg(x, y, z) == 0 || gold(x, y, z) != 0) continue;
          if (!detail::window_fits(v, patch, shape)) continue;
          const std::size_t key = fg.flat(x, y, z);
          if (!seen.insert(key).second) continue;
          chosen.push_back(v);
        }
  }
  if (chosen.empty() && healthy_n > 0)
    throw ValidationError("case '" + mcase.case_id + "' has no healthy voxels admitting a full patch window");

  for (int t = 0; t < healthy_n; ++t) {
    const Index3 v = chosen[static_cast<std::size_t>(t) % chosen.size()];
    PatchSpec s;
    s.case_id = mcase.case_id;
    s.center = v;
    s.source = v;
    s.label = ClassLabel::healthy;
    s.augmentation = Augmentation::none;
    specs.push_back(std::move(s));
  }
  return specs;
}

// Cuts the window out of all modalities plus a two-class one-hot target from
// the gold mask, then applies the spec's augmentation to both identically.
inline training::Sample<float> extract_patch(const MultiModalCase& mcase, const PatchSpec& spec,
                                             const SamplerConfig& config) {
  if (!mcase.gold.has_value())
    throw ValidationError("case '" + mcase.case_id + "' has no gold standard mask; cannot extract targets");
  const Index3 patch = config.patch_size;
  const Index3 shape = mcase.modalities.front().shape();
  if (!detail::window_fits(spec.center, patch, shape))
    throw ValidationError("patch window around " + index_to_string(spec.center) + " leaves the volume " +
                          index_to_string(shape));

  Index3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = spec.center[a] - patch[a] / 2;

  training::Sample<float> out;
  out.input = Tensor4<float>(mcase.num_modalities(), patch);
  out.target = Tensor4<float>(2, patch);
  const int pz = patch[2];
  for (int m = 0; m < mcase.num_modalities(); ++m) {
    const Volume& vol = mcase.modalities[static_cast<std::size_t>(m)];
    float* dst = out.input.channel(m);
    for (int x = 0; x < patch[0]; ++x)
      for (int y = 0; y < patch[1]; ++y) {
        const float* src = vol.data() + vol.flat(origin[0] + x, origin[1] + y, origin[2]);
        std::memcpy(dst + out.input.flat(0, x, y, 0) - out.input.flat(0, 0, 0, 0), src,
                    sizeof(float) * static_cast<std::size_t>(pz));
      }
  }
  const Mask& gold = *mcase.gold;
  float* bg = out.target.channel(0);
  float* fgc = out.target.channel(1);
  std::size_t i = 0;
  for (int x = 0; x < patch[0]; ++x)
    for (int y = 0; y < patch[1]; ++y)
      for (int z = 0; z < patch[2]; ++z, ++i) {
        const bool lesion = gold(origin[0] + x, origin[1] + y, origin[2] + z) != 0;
        bg[i] = lesion ? 0.f : 1.f;
        fgc[i] = lesion ? 1.f : 0.f;
      }

  augment_patch(out.input, out.target, spec.augmentation);
  return out;
}

// Samples every case with its own RNG stream derived from (seed, case_id) and
// holds out validation_fraction of each case's patches, stratified by class.
inline PatchSet build_patch_set(const std::vector<MultiModalCase>& cases, const SamplerConfig& config) {
  config.validate();
  if (cases.empty()) throw ValidationError("cannot build a patch set from zero cases");
  const int channels = cases.front().num_modalities();
  for (const MultiModalCase& c : cases)
    if (c.num_modalities() != channels)
      throw ValidationError("case '" + c.case_id + "' has " + std::to_string(c.num_modalities()) +
                            " modalities, expected " + std::to_string(channels) +
                            "; all cases must match");

  PatchSet out;
  for (const MultiModalCase& mcase : cases) {
    Rng case_rng(Rng::mix(config.seed, mcase.case_id));
    const std::vector<PatchSpec> specs = sample_centers(mcase, config, case_rng);

    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < specs.size(); ++i)
      by_class[static_cast<int>(specs[i].label)].push_back(i);

    std::vector<bool> is_val(specs.size(), false);
    for (auto& idx : by_class) {
      case_rng.shuffle(idx.begin(), idx.end());
      const std::size_t n_val =
          static_cast<std::size_t>(std::lround(config.validation_fraction * static_cast<double>(idx.size())));
      for (std::size_t j = 0; j < n_val; ++j) is_val[idx[j]] = true;
    }

    for (std::size_t i = 0; i < specs.size(); ++i) {
      training::Sample<float> sample = extract_patch(mcase, specs[i], config);
      if (is_val[i]) {
        out.validation.push_back(std::move(sample));
        out.validation_specs.push_back(specs[i]);
      } else {
        out.training.push_back(std::move(sample));
        out.training_specs.push_back(specs[i]);
      }
    }
  }
  return out;
}

namespace detail {

inline nlohmann::json spec_to_json(const PatchSpec& s) {
  return {{"case_id", s.case_id},
          {"center", {s.center[0], s.center[1], s.center[2]}},
          {"source", {s.source[0], s.source[1], s.source[2]}},
          {"label", to_string(s.label)},
          {"augmentation", to_string(s.augmentation)}};
}

inline PatchSpec spec_from_json(const nlohmann::json& j) {
  PatchSpec s;
  s.case_id = j.at("case_id").get<std::string>();
  for (int a = 0; a < 3; ++a) {
    s.center[a] = j.at("center").at(static_cast<std::size_t>(a)).get<int>();
    s.source[a] = j.at("source").at(static_cast<std::size_t>(a)).get<int>();
  }
  s.label = j.at("label").get<std::string>() == "lesion" ? ClassLabel::lesion : ClassLabel::healthy;
  s.augmentation = augmentation_from_string(j.at("augmentation").get<std::string>());
  return s;
}

inline void append_tensor(std::vector<unsigned char>& bytes, const Tensor4<float>& t) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
  bytes.insert(bytes.end(), p, p + t.size() * sizeof(float));
}

}  // namespace detail

// On-disk cache: <base>.json index plus <base>.bin packed float32 records,
// each record the input stack followed by the one-hot target.
inline void save_patch_set(const PatchSet& set, const std::string& base_path) {
  if (set.training.size() != set.training_specs.size() ||
      set.validation.size() != set.validation_specs.size())
    throw ValidationError("patch set samples and provenance are out of step");
  if (set.training.empty() && set.validation.empty())
    throw ValidationError("refusing to save an empty patch set");
  const Tensor4<float>& first = set.training.empty() ? set.validation.front().input : set.training.front().input;
  const Index3 patch = first.spatial();
  const int channels = first.channels();

  nlohmann::json index;
  index["patch"] = {patch[0], patch[1], patch[2]};
  index["channels"] = channels;
  index["classes"] = 2;
  index["dtype"] = "float32";
  index["byte_order"] = "little";
  index["record"] = "input then target";
  index["training"] = nlohmann::json::array();
  index["validation"] = nlohmann::json::array();
  for (const PatchSpec& s : set.training_specs) index["training"].push_back(detail::spec_to_json(s));
  for (const PatchSpec& s : set.validation_specs) index["validation"].push_back(detail::spec_to_json(s));

  std::vector<unsigned char> bytes;
  const std::size_t rec = (static_cast<std::size_t>(channels) + 2) * first.voxels() * sizeof(float);
  bytes.reserve(rec * (set.training.size() + set.validation.size()));
  auto append_all = [&](const std::vector<training::Sample<float>>& samples) {
    for (const auto& s : samples) {
      if (s.input.spatial() != patch || s.input.channels() != channels || s.target.channels() != 2 ||
          s.target.spatial() != patch)
        throw ValidationError("patch set contains mixed patch shapes; cannot serialize");
      detail::append_tensor(bytes, s.input);
      detail::append_tensor(bytes, s.target);
    }
  };
  append_all(set.training);
  append_all(set.validation);

  voxseg::detail::write_file_bytes(base_path + ".json",
                                   [&] {
                                     const std::string s = index.dump(2);
                                     return std::vector<unsigned char>(s.begin(), s.end());
                                   }());
  voxseg::detail::write_file_bytes(base_path + ".bin", bytes);
}

inline PatchSet load_patch_set(const std::string& base_path) {
  const std::vector<unsigned char> jb = voxseg::detail::read_file_bytes(base_path + ".json");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(jb.begin(), jb.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("patch index '" + base_path + ".json' is not valid JSON: " + e.what());
  }
  PatchSet out;
  Index3 patch;
  int channels = 0;
  try {
    for (int a = 0; a < 3; ++a) patch[a] = index.at("patch").at(static_cast<std::size_t>(a)).get<int>();
    channels = index.at("channels").get<int>();
    if (index.at("dtype").get<std::string>() != "float32" ||
        index.at("byte_order").get<std::string>() != "little")
      throw IoError("patch cache '" + base_path + "' has an unsupported encoding");
    for (const auto& j : index.at("training")) out.training_specs.push_back(detail::spec_from_json(j));
    for (const auto& j : index.at("validation")) out.validation_specs.push_back(detail::spec_from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("patch index '" + base_path + ".json' is incomplete: " + e.what());
  }

  const std::vector<unsigned char> bytes = voxseg::detail::read_file_bytes(base_path + ".bin");
  const std::size_t voxels = static_cast<std::size_t>(patch[0]) * patch[1] * patch[2];
  const std::size_t rec = (static_cast<std::size_t>(channels) + 2) * voxels * sizeof(float);
  const std::size_t total = out.training_specs.size() + out.validation_specs.size();
  if (bytes.size() != rec * total)
    throw IoError("patch data '" + base_path + ".bin' has " + std::to_string(bytes.size()) +
                  " bytes, expected " + std::to_string(rec * total));

  std::size_t off = 0;
  auto read_samples = [&](std::size_t n, std::vector<training::Sample<float>>& dst) {
    for (std::size_t i = 0; i < n; ++i) {
      training::Sample<float> s;
      s.input = Tensor4<float>(channels, patch);
      s.target = Tensor4<float>(2, patch);
      std::memcpy(s.input.data(), bytes.data() + off, s.input.size() * sizeof(float));
      off += s.input.size() * sizeof(float);
      std::memcpy(s.target.data(), bytes.data() + off, s.target.size() * sizeof(float));
      off += s.target.size() * sizeof(float);
      dst.push_back(std::move(s));
    }
  };
  read_samples(out.training_specs.size(), out.training);
  read_samples(out.validation_specs.size(), out.validation);
  return out;
}

}  // namespace voxseg::sampling
