#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/io.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::inference {

struct InferenceConfig {
  Index3 patch_size{24, 24, 16};
  Index3 extraction_step{4, 4, 1};
  int batch_size = 8;

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (patch_size[a] < 1)
        throw ValidationError("patch_size must be >= 1 on every axis");
      if (extraction_step[a] < 1 || extraction_step[a] > patch_size[a])
        throw ValidationError("extraction_step must lie in [1, patch_size] on every axis");
    }
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  }
};

// Per-voxel class probabilities on the full case grid. coverage counts the
// patch windows contributing to each voxel (identical for every ensemble
// member, so it is stored once).
struct ProbabilityMap {
  Tensor4<float> probabilities;
  Grid3<int> coverage;

  Index3 shape() const { return coverage.shape(); }
  const Spacing3& spacing() const { return coverage.spacing(); }
};

namespace detail {

inline std::vector<int> axis_origins(int extent, int patch, int step) {
  std::vector<int> o;
  for (int v = 0; v + patch <= extent; v += step) o.push_back(v);
  if (o.back() + patch != extent) o.push_back(extent - patch);
  return o;
}

}  // namespace detail

// Dense overlapped prediction: windows on the extraction-step lattice plus
// clamped end-of-axis windows, probabilities averaged over all covering
// windows and all networks.
template <typename T>
ProbabilityMap predict_volume(const std::vector<const model::Network<T>*>& networks,
                              const MultiModalCase& mcase, const InferenceConfig& cfg) {
  cfg.validate();
  mcase.validate();
  if (networks.empty()) throw ValidationError("predict_volume requires at least one network");
  for (const auto* n : networks)
    if (n == nullptr) throw ValidationError("predict_volume received a null network");
  const int channels = networks.front()->config().in_channels;
  const int classes = networks.front()->config().num_classes;
  for (const auto* n : networks) {
    if (n->config().in_channels != channels || n->config().num_classes != classes)
      throw ValidationError("ensemble networks disagree on channel or class counts");
  }
  if (mcase.num_modalities() != channels)
    throw ValidationError("case '" + mcase.case_id + "' has " +
                          std::to_string(mcase.num_modalities()) + " channels, networks expect " +
                          std::to_string(channels));
  const Index3 shape = mcase.modalities.front().shape();
  for (int a = 0; a < 3; ++a)
    if (shape[a] < cfg.patch_size[a])
      throw ValidationError("case '" + mcase.case_id + "' volume " + index_to_string(shape) +
                            " is smaller than the patch size " + index_to_string(cfg.patch_size));

  Tensor4<T> vol(channels, shape);
  for (int c = 0; c < channels; ++c) {
    const Volume& m = mcase.modalities[c];
    T* dst = vol.channel(c);
    for (std::size_t i = 0; i < m.size(); ++i) dst[i] = static_cast<T>(m[i]);
  }

  const auto xs = detail::axis_origins(shape[0], cfg.patch_size[0], cfg.extraction_step[0]);
  const auto ys = detail::axis_origins(shape[1], cfg.patch_size[1], cfg.extraction_step[1]);
  const auto zs = detail::axis_origins(shape[2], cfg.patch_size[2], cfg.extraction_step[2]);

  const int px = cfg.patch_size[0], py = cfg.patch_size[1], pz = cfg.patch_size[2];
  Tensor4<T> window(channels, cfg.patch_size);
  std::vector<typename model::Network<T>::Workspace> ws(networks.size());

  Tensor4<double> acc(classes, shape);
  Grid3<int> cov(shape, mcase.modalities.front().spacing(), 0);

  for (const int ox : xs)
    for (const int oy : ys)
      for (const int oz : zs) {
        for (int c = 0; c < channels; ++c) {
          const T* src = vol.channel(c);
          T* dst = window.channel(c);
          for (int x = 0; x < px; ++x)
            for (int y = 0; y < py; ++y)
              std::memcpy(dst + (static_cast<std::size_t>(x) * py + y) * pz,
                          src + vol.flat(0, ox + x, oy + y, oz) - vol.flat(0, 0, 0, 0),
                          sizeof(T) * pz);
        }
        for (std::size_t n = 0; n < networks.size(); ++n) {
          const Tensor4<T>& prob = networks[n]->forward(window, ws[n]);
          for (int c = 0; c < classes; ++c) {
            const T* sp = prob.channel(c);
            double* dp = acc.channel(c);
            for (int x = 0; x < px; ++x)
              for (int y = 0; y < py; ++y) {
                const std::size_t wo = (static_cast<std::size_t>(x) * py + y) * pz;
                const std::size_t vo = acc.flat(0, ox + x, oy + y, oz) - acc.flat(0, 0, 0, 0);
                for (int z = 0; z < pz; ++z) dp[vo + z] += static_cast<double>(sp[wo + z]);
              }
          }
        }
        for (int x = 0; x < px; ++x)
          for (int y = 0; y < py; ++y)
            for (int z = 0; z < pz; ++z) cov(ox + x, oy + y, oz + z) += 1;
      }

  ProbabilityMap out;
  out.probabilities = Tensor4<float>(classes, shape);
  const double nets = static_cast<double>(networks.size());
  for (int c = 0; c < classes; ++c) {
    const double* sp = acc.channel(c);
    float* dp = out.probabilities.channel(c);
    for (std::size_t v = 0; v < cov.size(); ++v)
      dp[v] = static_cast<float>(sp[v] / (cov[v] * nets));
  }
  out.coverage = std::move(cov);
  return out;
}

struct PostprocessParams {
  double threshold = 0.5;
  std::size_t min_lesion_size = 0;
  static constexpr int kConnectivity = 26;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0))
      throw ValidationError("threshold must lie strictly inside (0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"threshold", threshold},
            {"min_lesion_size", min_lesion_size},
            {"connectivity", kConnectivity}};
  }

  static PostprocessParams from_json(const nlohmann::json& j) {
    PostprocessParams p;
    p.threshold = j.at("threshold").get<double>();
    p.min_lesion_size = j.at("min_lesion_size").get<std::size_t>();
    if (j.contains("connectivity") && j.at("connectivity").get<int>() != kConnectivity)
      throw ValidationError("only 26-connectivity is supported");
    p.validate();
    return p;
  }

  bool operator==(const PostprocessParams&) const = default;
};

struct ComponentLabeling {
  Grid3<int> labels;               // 0 background, components numbered from 1
  std::vector<std::size_t> sizes;  // sizes[k] is the voxel count of label k+1
};

// Maximal 26-connected regions, labeled in raster first-encounter order.
inline ComponentLabeling connected_components(const Mask& mask) {
  ComponentLabeling out;
  out.labels = Grid3<int>(mask.shape(), mask.spacing(), 0);
  const Index3 s = mask.shape();
  std::vector<Index3> stack;
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z) {
        if (!mask(x, y, z) || out.labels(x, y, z) != 0) continue;
        const int label = static_cast<int>(out.sizes.size()) + 1;
        std::size_t count = 0;
        stack.assign(1, {x, y, z});
        out.labels(x, y, z) = label;
        while (!stack.empty()) {
          const Index3 v = stack.back();
          stack.pop_back();
          ++count;
          for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dz = -1; dz <= 1; ++dz) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                const int nx = v[0] + dx, ny = v[1] + dy, nz = v[2] + dz;
                if (!mask.contains(nx, ny, nz)) continue;
                if (!mask(nx, ny, nz) || out.labels(nx, ny, nz) != 0) continue;
                out.labels(nx, ny, nz) = label;
                stack.push_back({nx, ny, nz});
              }
        }
        out.sizes.push_back(count);
      }
  return out;
}

namespace detail {

inline Mask threshold_lesion(const ProbabilityMap& map, double threshold) {
  if (map.probabilities.channels() < 2)
    throw ValidationError("probability map needs a lesion class at channel 1");
  Mask m(map.shape(), map.spacing(), 0);
  const float* lesion = map.probabilities.channel(1);
  for (std::size_t v = 0; v < m.size(); ++v)
    m[v] = static_cast<double>(lesion[v]) >= threshold ? 1 : 0;
  return m;
}

}  // namespace detail

// Threshold the lesion class, then drop connected components smaller than
// min_lesion_size.
inline Mask binarize(const ProbabilityMap& map, const PostprocessParams& params) {
  params.validate();
  Mask m = detail::threshold_lesion(map, params.threshold);
  if (params.min_lesion_size > 1) {
    const ComponentLabeling cc = connected_components(m);
    for (std::size_t v = 0; v < m.size(); ++v)
      if (m[v] && cc.sizes[static_cast<std::size_t>(cc.labels[v]) - 1] < params.min_lesion_size)
        m[v] = 0;
  }
  return m;
}

struct ScoreConfig {
  double hd_max = 200.0;

  void validate() const {
    if (!(hd_max > 0.0)) throw ValidationError("hd_max must be > 0");
  }
};

// Harmonic-style combination of overlap and border quality:
// dsc * (1 - hd/hd_max) / (dsc + (1 - hd/hd_max)), 0 when both terms vanish.
inline double combined_score(double dsc, double hd, const ScoreConfig& cfg) {
  cfg.validate();
  if (!(dsc >= 0.0 && dsc <= 1.0)) throw ValidationError("dsc must lie in [0, 1]");
  if (!(hd >= 0.0)) throw ValidationError("hd must be >= 0");
  const double border = 1.0 - std::min(hd, cfg.hd_max) / cfg.hd_max;
  const double den = dsc + border;
  if (den == 0.0) return 0.0;
  return dsc * border / den;
}

struct ParamGrid {
  std::vector<double> thresholds;
  std::vector<std::size_t> min_sizes;

  static ParamGrid defaults() {
    ParamGrid g;
    for (int i = 1; i <= 9; ++i) g.thresholds.push_back(i / 10.0);
    for (std::size_t s = 10; s <= 100; s += 10) g.min_sizes.push_back(s);
    g.min_sizes.push_back(150);
    for (std::size_t s = 200; s <= 1000; s += 100) g.min_sizes.push_back(s);
    return g;
  }

  void validate() const {
    if (thresholds.empty() || min_sizes.empty())
      throw ValidationError("parameter grid must not be empty");
    for (const double t : thresholds)
      if (!(t > 0.0 && t < 1.0)) throw ValidationError("grid thresholds must lie in (0, 1)");
  }
};

struct GridCell {
  double threshold = 0.0;
  std::size_t min_size = 0;
  double mean_score = 0.0;
};

struct GridSearchResult {
  PostprocessParams params;
  double score = 0.0;
  std::vector<GridCell> table;  // threshold-major, min_size order as given
};

// Mean combined score over cases for every (threshold, min_size) cell.
// Components are labeled once per (case, threshold); ascending min_size cuts
// reuse the labeling, and the Hausdorff term is recomputed only when the
// surviving component set changes.
inline GridSearchResult grid_search(const std::vector<ProbabilityMap>& maps,
                                    const std::vector<Mask>& golds, const ParamGrid& grid,
                                    const ScoreConfig& score_cfg) {
  score_cfg.validate();
  grid.validate();
  if (maps.empty()) throw ValidationError("grid_search requires at least one case");
  if (maps.size() != golds.size())
    throw ValidationError("grid_search requires one gold mask per probability map");
  for (std::size_t i = 0; i < maps.size(); ++i)
    if (!(maps[i].shape() == golds[i].shape()))
      throw ValidationError("probability map and gold mask shapes disagree for case " +
                            std::to_string(i));

  std::vector<std::size_t> size_order(grid.min_sizes.size());
  for (std::size_t i = 0; i < size_order.size(); ++i) size_order[i] = i;
  std::sort(size_order.begin(), size_order.end(),
            [&](std::size_t a, std::size_t b) { return grid.min_sizes[a] < grid.min_sizes[b]; });

  const std::size_t nt = grid.thresholds.size(), ns = grid.min_sizes.size();
  std::vector<double> sum(nt * ns, 0.0);

  for (std::size_t ci = 0; ci < maps.size(); ++ci) {
    const Mask& gold = golds[ci];
    std::size_t gold_count = 0;
    for (std::size_t v = 0; v < gold.size(); ++v) gold_count += gold[v] != 0;

    for (std::size_t ti = 0; ti < nt; ++ti) {
      const Mask th_mask = detail::threshold_lesion(maps[ci], grid.thresholds[ti]);
      const ComponentLabeling cc = connected_components(th_mask);
      std::vector<std::size_t> overlap(cc.sizes.size(), 0);
      for (std::size_t v = 0; v < th_mask.size(); ++v)
        if (cc.labels[v] != 0 && gold[v] != 0) ++overlap[static_cast<std::size_t>(cc.labels[v]) - 1];

      std::vector<char> prev_keep;
      double prev_hd = 0.0;

      for (const std::size_t si : size_order) {
        const std::size_t s_min = grid.min_sizes[si];
        std::vector<char> keep(cc.sizes.size());
        std::size_t pred_count = 0, inter = 0;
        for (std::size_t k = 0; k < cc.sizes.size(); ++k) {
          keep[k] = cc.sizes[k] >= s_min;
          if (keep[k]) {
            pred_count += cc.sizes[k];
            inter += overlap[k];
          }
        }
        const double dsc = (pred_count + gold_count == 0)
                               ? 1.0
                               : 2.0 * static_cast<double>(inter) /
                                     static_cast<double>(pred_count + gold_count);
        if (prev_keep.empty() || keep != prev_keep) {
          Mask filtered(gold.shape(), gold.spacing(), 0);
          for (std::size_t v = 0; v < filtered.size(); ++v)
            filtered[v] =
                cc.labels[v] != 0 && keep[static_cast<std::size_t>(cc.labels[v]) - 1] ? 1 : 0;
          const metrics::HausdorffResult h = metrics::hausdorff(filtered, gold);
          prev_hd = h.defined ? h.distance : score_cfg.hd_max;
          prev_keep = std::move(keep);
        }
        sum[ti * ns + si] += combined_score(dsc, prev_hd, score_cfg);
      }
    }
  }

  GridSearchResult res;
  res.score = -1.0;
  const double n = static_cast<double>(maps.size());
  for (std::size_t ti = 0; ti < nt; ++ti)
    for (std::size_t si = 0; si < ns; ++si) {
      GridCell cell{grid.thresholds[ti], grid.min_sizes[si], sum[ti * ns + si] / n};
      res.table.push_back(cell);
      const bool better =
          cell.mean_score > res.score ||
          (cell.mean_score == res.score &&
           (cell.min_size < res.params.min_lesion_size ||
            (cell.min_size == res.params.min_lesion_size && cell.threshold > res.params.threshold)));
      if (res.score < 0.0 || better) {
        res.params.threshold = cell.threshold;
        res.params.min_lesion_size = cell.min_size;
        res.score = cell.mean_score;
      }
    }
  return res;
}

// Probability map cache: <base>.json geometry header plus <base>.bin holding
// little-endian float32 class probabilities then int32 coverage counts.
inline void save_probability_map(const ProbabilityMap& map, const std::string& base_path) {
  if (map.probabilities.voxels() != map.coverage.size())
    throw ValidationError("probability map and coverage shapes disagree");
  const Index3 sh = map.shape();
  nlohmann::json j{{"classes", map.probabilities.channels()},
                   {"shape", {sh[0], sh[1], sh[2]}},
                   {"spacing", {map.spacing()[0], map.spacing()[1], map.spacing()[2]}},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"record", "class probabilities then coverage"}};
  const std::string text = j.dump(2);
  voxseg::detail::write_file_bytes(base_path + ".json",
                                   std::vector<unsigned char>(text.begin(), text.end()));

  std::vector<unsigned char> bytes(map.probabilities.size() * 4 + map.coverage.size() * 4);
  std::memcpy(bytes.data(), map.probabilities.data(), map.probabilities.size() * 4);
  std::vector<std::int32_t> cov32(map.coverage.size());
  for (std::size_t i = 0; i < cov32.size(); ++i) cov32[i] = map.coverage[i];
  std::memcpy(bytes.data() + map.probabilities.size() * 4, cov32.data(), cov32.size() * 4);
  voxseg::detail::write_file_bytes(base_path + ".bin", bytes);
}

inline ProbabilityMap load_probability_map(const std::string& base_path) {
  const auto header = voxseg::detail::read_file_bytes(base_path + ".json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header.begin(), header.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + base_path + ".json' is not a probability map header: " + e.what());
  }
  try {
    if (j.at("dtype") != "float32" || j.at("byte_order") != "little")
      throw IoError("'" + base_path + "' uses an unsupported encoding");
    const int classes = j.at("classes").get<int>();
    const auto sh = j.at("shape");
    const auto sp = j.at("spacing");
    const Index3 shape{sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>()};
    const Spacing3 spacing{sp.at(0).get<float>(), sp.at(1).get<float>(), sp.at(2).get<float>()};

    ProbabilityMap map;
    map.probabilities = Tensor4<float>(classes, shape);
    map.coverage = Grid3<int>(shape, spacing, 0);
    const auto bytes = voxseg::detail::read_file_bytes(base_path + ".bin");
    const std::size_t want = map.probabilities.size() * 4 + map.coverage.size() * 4;
    if (bytes.size() != want)
      throw IoError("'" + base_path + ".bin' has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(want));
    std::memcpy(map.probabilities.data(), bytes.data(), map.probabilities.size() * 4);
    std::vector<std::int32_t> cov32(map.coverage.size());
    std::memcpy(cov32.data(), bytes.data() + map.probabilities.size() * 4, cov32.size() * 4);
    for (std::size_t i = 0; i < cov32.size(); ++i) map.coverage[i] = cov32[i];
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + base_path + ".json' is missing probability map fields: " + e.what());
  }
}

}  // namespace voxseg::inference
