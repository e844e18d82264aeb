#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/io.hpp"
#include "voxseg/loss.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/sampling.hpp"
#include "voxseg/training.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::cli {

namespace detail {

// Stage wrapper: prefixes error messages with pipeline context, keeping the
// error category intact so callers can still map it to an exit code.
template <typename F>
auto run_stage(const std::string& context, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(context + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(context + ": " + e.what());
  } catch (const Error& e) {
    throw Error(context + ": " + e.what());
  }
}

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline nlohmann::json index3_to_json(const Index3& v) { return {v[0], v[1], v[2]}; }

inline Index3 index3_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 3) {
    throw ValidationError("field '" + field + "' must be an array of three integers");
  }
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline std::string registration_mode_name(preprocess::RegistrationMode m) {
  switch (m) {
    case preprocess::RegistrationMode::rigid: return "rigid";
    case preprocess::RegistrationMode::none: return "none";
    case preprocess::RegistrationMode::precomputed: return "precomputed";
  }
  throw ValidationError("unknown registration mode");
}

inline preprocess::RegistrationMode registration_mode_from_name(const std::string& name) {
  if (name == "rigid") return preprocess::RegistrationMode::rigid;
  if (name == "none") return preprocess::RegistrationMode::none;
  if (name == "precomputed") return preprocess::RegistrationMode::precomputed;
  throw ValidationError("unknown registration mode '" + name + "'");
}

inline nlohmann::json registration_to_json(const preprocess::RegistrationConfig& c) {
  return {{"mode", registration_mode_name(c.mode)},
          {"pyramid_levels", c.pyramid_levels},
          {"max_iterations", c.max_iterations},
          {"step_size", c.step_size},
          {"tolerance", c.tolerance},
          {"fill_value", c.fill_value},
          {"transform_path", c.transform_path}};
}

inline preprocess::RegistrationConfig registration_from_json(const nlohmann::json& j) {
  preprocess::RegistrationConfig c;
  if (j.contains("mode")) c.mode = registration_mode_from_name(j.at("mode").get<std::string>());
  c.pyramid_levels = j.value("pyramid_levels", c.pyramid_levels);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.step_size = j.value("step_size", c.step_size);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.fill_value = j.value("fill_value", c.fill_value);
  c.transform_path = j.value("transform_path", c.transform_path);
  return c;
}

// Sampler seed and trainer seed/checkpoint are runtime-assigned from the
// pipeline seed, so they are not part of the serialized configuration.
inline nlohmann::json sampler_to_json(const sampling::SamplerConfig& c) {
  return {{"patch_size", index3_to_json(c.patch_size)},
          {"goal_per_case", c.goal_per_case},
          {"lesion_fraction", c.lesion_fraction},
          {"max_offset", index3_to_json(c.max_offset)},
          {"validation_fraction", c.validation_fraction}};
}

inline sampling::SamplerConfig sampler_from_json(const nlohmann::json& j) {
  sampling::SamplerConfig c;
  if (j.contains("patch_size")) c.patch_size = index3_from_json(j.at("patch_size"), "patch_size");
  c.goal_per_case = j.value("goal_per_case", c.goal_per_case);
  c.lesion_fraction = j.value("lesion_fraction", c.lesion_fraction);
  if (j.contains("max_offset")) c.max_offset = index3_from_json(j.at("max_offset"), "max_offset");
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  return c;
}

inline nlohmann::json network_to_json(const model::NetworkConfig& c) { return c.to_json(); }

inline model::NetworkConfig network_from_json(const nlohmann::json& j) {
  model::NetworkConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.base_filters = j.value("base_filters", c.base_filters);
  c.resolution_steps = j.value("resolution_steps", c.resolution_steps);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  return c;
}

inline nlohmann::json trainer_to_json(const training::TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"patience", c.patience},
          {"max_epochs", c.max_epochs},
          {"rho", c.rho},
          {"epsilon", c.epsilon}};
}

inline training::TrainConfig trainer_from_json(const nlohmann::json& j) {
  training::TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.rho = j.value("rho", c.rho);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

inline nlohmann::json focal_to_json(const loss::FocalConfig<float>& c) {
  return {{"gamma", c.gamma}, {"alpha", c.alpha}};
}

inline loss::FocalConfig<float> focal_from_json(const nlohmann::json& j) {
  loss::FocalConfig<float> c;
  c.gamma = j.value("gamma", c.gamma);
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<std::vector<float>>();
  return c;
}

inline nlohmann::json inference_to_json(const inference::InferenceConfig& c) {
  return {{"patch_size", index3_to_json(c.patch_size)},
          {"extraction_step", index3_to_json(c.extraction_step)},
          {"batch_size", c.batch_size}};
}

inline inference::InferenceConfig inference_from_json(const nlohmann::json& j) {
  inference::InferenceConfig c;
  if (j.contains("patch_size")) c.patch_size = index3_from_json(j.at("patch_size"), "patch_size");
  if (j.contains("extraction_step")) {
    c.extraction_step = index3_from_json(j.at("extraction_step"), "extraction_step");
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  return c;
}

inline nlohmann::json score_to_json(const inference::ScoreConfig& c) {
  return {{"hd_max", c.hd_max}};
}

inline inference::ScoreConfig score_from_json(const nlohmann::json& j) {
  inference::ScoreConfig c;
  c.hd_max = j.value("hd_max", c.hd_max);
  return c;
}

inline nlohmann::json grid_to_json(const inference::ParamGrid& g) {
  return {{"thresholds", g.thresholds}, {"min_sizes", g.min_sizes}};
}

inline inference::ParamGrid grid_from_json(const nlohmann::json& j) {
  inference::ParamGrid g = inference::ParamGrid::defaults();
  if (j.contains("thresholds")) g.thresholds = j.at("thresholds").get<std::vector<double>>();
  if (j.contains("min_sizes")) g.min_sizes = j.at("min_sizes").get<std::vector<std::size_t>>();
  return g;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  voxseg::detail::write_file_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

inline std::string read_text_file(const std::string& path) {
  const std::vector<unsigned char> bytes = voxseg::detail::read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline nlohmann::json parse_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse '" + path + "': " + e.what());
  }
}

}  // namespace detail

// Full cross-validation run description. One seed drives fold assignment and
// every per-fold sampler, initializer, and trainer stream.
struct PipelineConfig {
  std::string manifest_path;
  std::string output_dir;
  int fold_count = 4;
  std::uint64_t seed = 0;
  preprocess::RegistrationConfig registration;
  sampling::SamplerConfig sampler;
  model::NetworkConfig network;
  training::TrainConfig trainer;
  loss::FocalConfig<float> focal;
  inference::InferenceConfig infer;
  inference::ScoreConfig score;
  inference::ParamGrid grid = inference::ParamGrid::defaults();

  void validate() const {
    if (manifest_path.empty()) throw ValidationError("manifest_path must not be empty");
    if (output_dir.empty()) throw ValidationError("output_dir must not be empty");
    if (fold_count < 2) {
      throw ValidationError("fold_count must be at least 2, got " + std::to_string(fold_count));
    }
    registration.validate();
    sampler.validate();
    network.validate();
    trainer.validate();
    focal.validate(network.num_classes);
    infer.validate();
    score.validate();
    grid.validate();
    if (network.num_classes != 2) {
      throw ValidationError("cross-validation postprocessing expects 2 classes, got " +
                            std::to_string(network.num_classes));
    }
    if (sampler.patch_size != infer.patch_size) {
      throw ValidationError("sampler and inference patch sizes must match");
    }
    const int stride = 1 << (network.resolution_steps - 1);
    for (int a = 0; a < 3; ++a) {
      if (sampler.patch_size[a] % stride != 0) {
        throw ValidationError("patch size " + index_to_string(sampler.patch_size) +
                              " must be divisible by the network stride " + std::to_string(stride));
      }
    }
  }

  nlohmann::json to_json() const {
    return {{"manifest", manifest_path},
            {"output_dir", output_dir},
            {"fold_count", fold_count},
            {"seed", seed},
            {"registration", detail::registration_to_json(registration)},
            {"sampler", detail::sampler_to_json(sampler)},
            {"network", detail::network_to_json(network)},
            {"training", detail::trainer_to_json(trainer)},
            {"focal", detail::focal_to_json(focal)},
            {"inference", detail::inference_to_json(infer)},
            {"score", detail::score_to_json(score)},
            {"grid", detail::grid_to_json(grid)}};
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    try {
      PipelineConfig c;
      c.manifest_path = j.value("manifest", c.manifest_path);
      c.output_dir = j.value("output_dir", c.output_dir);
      c.fold_count = j.value("fold_count", c.fold_count);
      c.seed = j.value("seed", c.seed);
      if (j.contains("registration")) {
        c.registration = detail::registration_from_json(j.at("registration"));
      }
      if (j.contains("sampler")) c.sampler = detail::sampler_from_json(j.at("sampler"));
      if (j.contains("network")) c.network = detail::network_from_json(j.at("network"));
      if (j.contains("training")) c.trainer = detail::trainer_from_json(j.at("training"));
      if (j.contains("focal")) c.focal = detail::focal_from_json(j.at("focal"));
      if (j.contains("inference")) c.infer = detail::inference_from_json(j.at("inference"));
      if (j.contains("score")) c.score = detail::score_from_json(j.at("score"));
      if (j.contains("grid")) c.grid = detail::grid_from_json(j.at("grid"));
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed pipeline config: ") + e.what());
    }
  }

  static PipelineConfig load(const std::string& path) {
    return from_json(detail::parse_json_file(path));
  }

  void save(const std::string& path) const { detail::write_text_file(path, to_json().dump(2) + "\n"); }

  // Content hash over everything that affects results. The output directory
  // is excluded: the same experiment may be rerun elsewhere.
  std::string hash() const {
    nlohmann::json j = to_json();
    j.erase("output_dir");
    return detail::fnv1a_hex(j.dump());
  }
};

// Deterministic fold assignment: sort ids, shuffle once with the given seed,
// deal round-robin so fold sizes differ by at most one.
inline std::vector<std::vector<std::string>> fold_split(std::vector<std::string> case_ids,
                                                        int fold_count, std::uint64_t seed) {
  if (fold_count < 2) {
    throw ValidationError("fold_count must be at least 2, got " + std::to_string(fold_count));
  }
  if (case_ids.size() < static_cast<std::size_t>(fold_count)) {
    throw ValidationError("cannot split " + std::to_string(case_ids.size()) + " cases into " +
                          std::to_string(fold_count) + " folds");
  }
  std::sort(case_ids.begin(), case_ids.end());
  for (std::size_t i = 1; i < case_ids.size(); ++i) {
    if (case_ids[i] == case_ids[i - 1]) {
      throw ValidationError("duplicate case id '" + case_ids[i] + "'");
    }
  }
  Rng rng(seed);
  rng.shuffle(case_ids.begin(), case_ids.end());
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(fold_count));
  for (std::size_t i = 0; i < case_ids.size(); ++i) {
    folds[i % static_cast<std::size_t>(fold_count)].push_back(std::move(case_ids[i]));
  }
  return folds;
}

struct FoldResult {
  int fold = 0;
  std::vector<std::string> held_out;
  std::string weights_path;
  training::TrainHistory history;
  bool resumed = false;
};

struct CvResult {
  std::vector<FoldResult> folds;
  inference::PostprocessParams params;
  double grid_score = 0.0;
  metrics::EvaluationReport report;
  std::string report_csv_path;
  std::string report_json_path;
};

namespace detail {

inline std::string fold_tag(int fold) { return "fold " + std::to_string(fold); }

inline bool fold_artifacts_present(const std::filesystem::path& fold_dir,
                                   const std::vector<std::string>& held_out,
                                   const std::string& config_hash) {
  namespace fs = std::filesystem;
  const fs::path marker = fold_dir / "complete.json";
  if (!fs::exists(marker)) return false;
  try {
    const nlohmann::json m = parse_json_file(marker.string());
    if (m.value("hash", std::string()) != config_hash) return false;
  } catch (const Error&) {
    return false;
  }
  if (!fs::exists(fold_dir / "weights.vsw")) return false;
  for (const std::string& id : held_out) {
    if (!fs::exists(fold_dir / "maps" / (id + ".json"))) return false;
    if (!fs::exists(fold_dir / "maps" / (id + ".bin"))) return false;
  }
  return true;
}

}  // namespace detail

// Runs the full experiment: load, augment, per-fold train and predict, one
// shared operating-point search, final masks and report. Artifacts from a
// finished fold are reused on rerun when the config hash matches.
inline CvResult run_fold_cv(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();

  const fs::path out(cfg.output_dir);
  fs::create_directories(out);
  const std::string config_hash = cfg.hash();

  const fs::path config_path = out / "config.json";
  if (fs::exists(config_path)) {
    const nlohmann::json prior = detail::parse_json_file(config_path.string());
    if (prior.value("hash", std::string()) != config_hash) {
      throw ValidationError("output directory '" + cfg.output_dir +
                            "' holds artifacts from a different configuration; use a fresh "
                            "directory or the original config");
    }
  } else {
    const nlohmann::json j{{"hash", config_hash}, {"config", cfg.to_json()}};
    detail::write_text_file(config_path.string(), j.dump(2) + "\n");
  }

  const Manifest manifest = detail::run_stage("stage 'load'", [&] {
    Manifest m = load_manifest(cfg.manifest_path);
    const std::vector<std::string> missing = preflight_check(m);
    if (!missing.empty()) {
      std::string msg = "manifest references missing files:";
      for (const std::string& p : missing) msg += "\n  " + p;
      throw ValidationError(msg);
    }
    return m;
  });

  std::vector<MultiModalCase> cases;
  cases.reserve(manifest.cases.size());
  for (const CaseEntry& entry : manifest.cases) {
    MultiModalCase raw = detail::run_stage("stage 'load' (case '" + entry.case_id + "')",
                                           [&] { return load_case(manifest, entry); });
    if (!raw.gold.has_value()) {
      throw ValidationError("case '" + entry.case_id +
                            "' has no reference mask; cross-validation requires one per case");
    }
    cases.push_back(detail::run_stage("stage 'preprocess' (case '" + entry.case_id + "')", [&] {
      return preprocess::symmetric_augment(raw, cfg.registration);
    }));
  }
  if (cases.empty()) throw ValidationError("manifest lists no cases");
  for (const MultiModalCase& c : cases) {
    if (c.num_modalities() != cfg.network.in_channels) {
      throw ValidationError("network expects " + std::to_string(cfg.network.in_channels) +
                            " input channels but case '" + c.case_id + "' provides " +
                            std::to_string(c.num_modalities()) + " after augmentation");
    }
  }

  std::unordered_map<std::string, const MultiModalCase*> by_id;
  std::vector<std::string> ids;
  ids.reserve(cases.size());
  for (const MultiModalCase& c : cases) {
    ids.push_back(c.case_id);
    by_id[c.case_id] = &c;
  }

  const std::vector<std::vector<std::string>> folds =
      fold_split(ids, cfg.fold_count, Rng::mix(cfg.seed, "cv/folds"));
  {
    nlohmann::json j{{"hash", config_hash}, {"folds", folds}};
    detail::write_text_file((out / "folds.json").string(), j.dump(2) + "\n");
  }

  CvResult result;
  std::vector<std::string> eval_ids;
  std::vector<inference::ProbabilityMap> maps;
  std::vector<Mask> golds;

  for (int f = 0; f < cfg.fold_count; ++f) {
    const fs::path fold_dir = out / ("fold_" + std::to_string(f));
    fs::create_directories(fold_dir / "maps");

    FoldResult fr;
    fr.fold = f;
    fr.held_out = folds[static_cast<std::size_t>(f)];
    fr.weights_path = (fold_dir / "weights.vsw").string();
    fr.resumed = detail::fold_artifacts_present(fold_dir, fr.held_out, config_hash);

    std::optional<model::Network<float>> net;
    if (fr.resumed) {
      net = detail::run_stage("stage 'resume' (" + detail::fold_tag(f) + ")", [&] {
        return model::Network<float>::load_weights(fr.weights_path, &cfg.network);
      });
    } else {
      std::vector<MultiModalCase> train_cases;
      for (const MultiModalCase& c : cases) {
        const auto& held = fr.held_out;
        if (std::find(held.begin(), held.end(), c.case_id) == held.end()) {
          train_cases.push_back(c);
        }
      }

      // The patch cache is a stage artifact: a fold interrupted mid-training
      // resumes without resampling. The config hash guard on the output
      // directory keeps caches from other configs out.
      const std::string patches_base = (fold_dir / "patches").string();
      const sampling::PatchSet patches =
          detail::run_stage("stage 'sample' (" + detail::fold_tag(f) + ")", [&] {
            namespace sfs = std::filesystem;
            if (sfs::exists(patches_base + ".json") && sfs::exists(patches_base + ".bin")) {
              return sampling::load_patch_set(patches_base);
            }
            sampling::SamplerConfig scfg = cfg.sampler;
            scfg.seed = Rng::mix(cfg.seed, "cv/fold" + std::to_string(f) + "/sample");
            sampling::PatchSet fresh = sampling::build_patch_set(train_cases, scfg);
            sampling::save_patch_set(fresh, patches_base);
            return fresh;
          });

      Rng init_rng(Rng::mix(cfg.seed, "cv/fold" + std::to_string(f) + "/init"));
      net.emplace(cfg.network, init_rng);

      training::TrainConfig tcfg = cfg.trainer;
      tcfg.seed = Rng::mix(cfg.seed, "cv/fold" + std::to_string(f) + "/train");
      tcfg.checkpoint_path = (fold_dir / "checkpoint.vsw").string();
      fr.history = detail::run_stage("stage 'train' (" + detail::fold_tag(f) + ")", [&] {
        return training::train(*net, patches.training, patches.validation, tcfg, cfg.focal);
      });
      net->save_weights(fr.weights_path);
      fr.history.write_csv((fold_dir / "history.csv").string());
    }

    for (const std::string& id : fr.held_out) {
      const std::string base = (fold_dir / "maps" / id).string();
      const std::string ctx = "stage 'predict' (" + detail::fold_tag(f) + ", case '" + id + "')";
      inference::ProbabilityMap map;
      if (fr.resumed) {
        map = detail::run_stage(ctx, [&] { return inference::load_probability_map(base); });
      } else {
        map = detail::run_stage(ctx, [&] {
          const std::vector<const model::Network<float>*> nets{&*net};
          return inference::predict_volume(nets, *by_id.at(id), cfg.infer);
        });
        inference::save_probability_map(map, base);
      }
      eval_ids.push_back(id);
      maps.push_back(std::move(map));
      golds.push_back(*by_id.at(id)->gold);
    }

    if (!fr.resumed) {
      const nlohmann::json m{{"hash", config_hash}, {"cases", fr.held_out}};
      detail::write_text_file((fold_dir / "complete.json").string(), m.dump(2) + "\n");
    }
    result.folds.push_back(std::move(fr));
  }

  const inference::GridSearchResult gs = detail::run_stage(
      "stage 'gridsearch'", [&] { return inference::grid_search(maps, golds, cfg.grid, cfg.score); });
  result.params = gs.params;
  result.grid_score = gs.score;
  {
    nlohmann::json j{{"hash", config_hash},
                     {"params", result.params.to_json()},
                     {"mean_combined_score", result.grid_score}};
    detail::write_text_file((out / "postprocess.json").string(), j.dump(2) + "\n");
  }

  fs::create_directories(out / "masks");
  std::vector<Mask> preds;
  preds.reserve(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::string ctx = "stage 'postprocess' (case '" + eval_ids[i] + "')";
    Mask m = detail::run_stage(ctx, [&] { return inference::binarize(maps[i], result.params); });
    save_mask(m, (out / "masks" / (eval_ids[i] + ".rvol")).string());
    preds.push_back(std::move(m));
  }

  result.report = detail::run_stage("stage 'evaluate'", [&] {
    return metrics::evaluate_cases(eval_ids, preds, golds, cfg.score.hd_max);
  });
  result.report_csv_path = (out / "report.csv").string();
  result.report_json_path = (out / "report.json").string();
  result.report.write_csv(result.report_csv_path);
  {
    nlohmann::json j = result.report.to_json();
    j["hash"] = config_hash;
    detail::write_text_file(result.report_json_path, j.dump(2) + "\n");
  }
  return result;
}

}  // namespace voxseg::cli
