#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "voxseg/pipeline.hpp"
#include "voxseg/synthetic.hpp"

namespace voxseg::cli {

namespace detail {

inline void require_field(const std::string& value, const std::string& field,
                          const std::string& flag) {
  if (value.empty()) {
    throw ValidationError("config field '" + field + "' is empty; pass " + flag +
                          " or set it in the config file");
  }
}

inline Manifest load_checked_manifest(const std::string& path) {
  const Manifest m = load_manifest(path);
  const std::vector<std::string> missing = preflight_check(m);
  if (!missing.empty()) {
    std::string msg = "manifest references missing files:";
    for (const std::string& p : missing) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  if (m.cases.empty()) throw ValidationError("manifest lists no cases");
  return m;
}

inline void require_all_present(const std::vector<std::string>& missing, const std::string& what) {
  if (missing.empty()) return;
  std::string msg = "missing " + what + ":";
  for (const std::string& p : missing) msg += "\n  " + p;
  throw ValidationError(msg);
}

inline void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) {
    throw ValidationError("missing " + what + ": " + path);
  }
}

inline std::string format_aggregate(const metrics::Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", a.mean, a.stddev);
  return buf;
}

}  // namespace detail

inline void run_synth(const std::string& spec_path, const std::string& out_dir,
                      std::optional<std::uint64_t> seed, std::ostream& out) {
  SyntheticSpec spec;
  if (!spec_path.empty()) {
    detail::require_file(spec_path, "spec file");
    spec = SyntheticSpec::from_json(detail::parse_json_file(spec_path));
  }
  if (seed) spec.seed = *seed;
  const Manifest m = write_synthetic_dataset(spec, out_dir);
  out << "wrote " << m.cases.size() << " synthetic cases ("
      << m.cases.front().modalities.size() << " modalities) to " << out_dir << "\n";
}

// Flips and registers every case, writing an augmented dataset whose manifest
// carries twice the input channel count.
inline void run_preprocess(const PipelineConfig& cfg, std::ostream& out) {
  detail::require_field(cfg.manifest_path, "manifest", "--manifest");
  detail::require_field(cfg.output_dir, "output_dir", "--out");
  cfg.registration.validate();
  const Manifest m = detail::load_checked_manifest(cfg.manifest_path);

  namespace fs = std::filesystem;
  const fs::path root(cfg.output_dir);
  Manifest aug;
  aug.root = cfg.output_dir;
  int channels = 0;
  for (const CaseEntry& entry : m.cases) {
    const MultiModalCase raw = load_case(m, entry);
    const MultiModalCase done = detail::run_stage("case '" + entry.case_id + "'", [&] {
      return preprocess::symmetric_augment(raw, cfg.registration);
    });
    fs::create_directories(root / done.case_id);
    CaseEntry e;
    e.case_id = done.case_id;
    for (std::size_t i = 0; i < done.modalities.size(); ++i) {
      const std::string rel = done.case_id + "/" + done.modality_names[i] + ".rvol";
      save_volume(done.modalities[i], (root / rel).string());
      e.modalities.push_back({done.modality_names[i], rel});
    }
    if (done.gold.has_value()) {
      const std::string rel = done.case_id + "/gold.rvol";
      save_mask(*done.gold, (root / rel).string());
      e.gold = rel;
    }
    channels = done.num_modalities();
    aug.cases.push_back(std::move(e));
  }
  save_manifest(aug, (root / "manifest.json").string());
  out << "augmented " << aug.cases.size() << " cases to " << channels << " channels each in "
      << cfg.output_dir << "\n";
}

inline void run_sample(const PipelineConfig& cfg, const std::string& out_base, std::ostream& out) {
  detail::require_field(cfg.manifest_path, "manifest", "--manifest");
  const Manifest m = detail::load_checked_manifest(cfg.manifest_path);
  const std::vector<MultiModalCase> cases = load_all_cases(m);
  sampling::SamplerConfig scfg = cfg.sampler;
  scfg.seed = cfg.seed;
  const sampling::PatchSet set = sampling::build_patch_set(cases, scfg);
  sampling::save_patch_set(set, out_base);
  out << "patch cache '" << out_base << "': " << set.training.size() << " training / "
      << set.validation.size() << " validation patches\n";
}

inline void run_train(const PipelineConfig& cfg, const std::string& patches_base,
                      const std::string& weights_out, const std::string& history_out,
                      std::ostream& out) {
  detail::require_file(patches_base + ".json", "patch cache index");
  detail::require_file(patches_base + ".bin", "patch cache data");
  const sampling::PatchSet set = sampling::load_patch_set(patches_base);
  const int patch_channels = set.training.front().input.channels();
  if (patch_channels != cfg.network.in_channels) {
    throw ValidationError("config field 'network.in_channels' is " +
                          std::to_string(cfg.network.in_channels) + " but the patch cache holds " +
                          std::to_string(patch_channels) + " channels");
  }
  Rng init_rng(Rng::mix(cfg.seed, "init"));
  model::Network<float> net(cfg.network, init_rng);
  training::TrainConfig tcfg = cfg.trainer;
  tcfg.seed = Rng::mix(cfg.seed, "train");
  tcfg.checkpoint_path = weights_out + ".checkpoint";
  const training::TrainHistory hist =
      training::train(net, set.training, set.validation, tcfg, cfg.focal);
  net.save_weights(weights_out);
  if (!history_out.empty()) hist.write_csv(history_out);
  out << "trained " << hist.rows.size() << " epochs (best epoch " << hist.best_epoch
      << ", monitored " << hist.best_monitored << "); weights -> " << weights_out << "\n";
}

// Accepts either a bare parameter object or the gridsearch output file.
inline inference::PostprocessParams load_postprocess_params(const std::string& path) {
  detail::require_file(path, "operating point file");
  const nlohmann::json j = detail::parse_json_file(path);
  return inference::PostprocessParams::from_json(j.contains("params") ? j.at("params") : j);
}

inline void run_predict(const PipelineConfig& cfg, const std::vector<std::string>& weights_paths,
                        const std::string& out_dir, const std::string& params_path,
                        const std::string& masks_dir, std::ostream& out) {
  detail::require_field(cfg.manifest_path, "manifest", "--manifest");
  std::vector<model::Network<float>> nets;
  nets.reserve(weights_paths.size());
  for (const std::string& p : weights_paths) {
    detail::require_file(p, "weight file");
    nets.push_back(model::Network<float>::load_weights(p));
  }
  std::vector<const model::Network<float>*> ptrs;
  for (const model::Network<float>& n : nets) ptrs.push_back(&n);

  std::optional<inference::PostprocessParams> params;
  if (!params_path.empty()) {
    params = load_postprocess_params(params_path);
    std::filesystem::create_directories(masks_dir);
  }

  const Manifest m = detail::load_checked_manifest(cfg.manifest_path);
  std::filesystem::create_directories(out_dir);
  for (const CaseEntry& entry : m.cases) {
    const MultiModalCase mcase = load_case(m, entry);
    const inference::ProbabilityMap map = detail::run_stage(
        "case '" + entry.case_id + "'",
        [&] { return inference::predict_volume(ptrs, mcase, cfg.infer); });
    inference::save_probability_map(map, out_dir + "/" + entry.case_id);
    if (params) {
      save_mask(inference::binarize(map, *params), masks_dir + "/" + entry.case_id + ".rvol");
    }
  }
  out << "predicted " << m.cases.size() << " cases with a " << nets.size()
      << "-network ensemble -> " << out_dir << "\n";
  if (params) out << "binarized masks -> " << masks_dir << "\n";
}

inline void run_gridsearch(const PipelineConfig& cfg, const std::string& maps_dir,
                           const std::string& out_path, std::ostream& out) {
  detail::require_field(cfg.manifest_path, "manifest", "--manifest");
  const Manifest m = detail::load_checked_manifest(cfg.manifest_path);

  std::vector<std::string> missing;
  for (const CaseEntry& entry : m.cases) {
    if (!entry.gold.has_value()) {
      throw ValidationError("case '" + entry.case_id +
                            "' has no reference mask; the grid search requires one per case");
    }
    for (const char* ext : {".json", ".bin"}) {
      const std::string p = maps_dir + "/" + entry.case_id + ext;
      if (!std::filesystem::exists(p)) missing.push_back(p);
    }
  }
  detail::require_all_present(missing, "probability maps");

  std::vector<inference::ProbabilityMap> maps;
  std::vector<Mask> golds;
  for (const CaseEntry& entry : m.cases) {
    maps.push_back(inference::load_probability_map(maps_dir + "/" + entry.case_id));
    golds.push_back(load_case(m, entry).gold.value());
  }
  const inference::GridSearchResult gs = inference::grid_search(maps, golds, cfg.grid, cfg.score);

  nlohmann::json table = nlohmann::json::array();
  for (const inference::GridCell& c : gs.table) {
    table.push_back({{"threshold", c.threshold},
                     {"min_size", c.min_size},
                     {"mean_score", c.mean_score}});
  }
  const nlohmann::json j{{"params", gs.params.to_json()},
                         {"mean_combined_score", gs.score},
                         {"table", std::move(table)}};
  detail::write_text_file(out_path, j.dump(2) + "\n");
  out << "best threshold " << gs.params.threshold << ", min lesion size "
      << gs.params.min_lesion_size << " (mean combined score " << gs.score << ") -> " << out_path
      << "\n";
}

inline void run_evaluate(const PipelineConfig& cfg, const std::string& pred_dir,
                         const std::string& out_base, std::ostream& out) {
  detail::require_field(cfg.manifest_path, "manifest", "--manifest");
  const Manifest m = detail::load_checked_manifest(cfg.manifest_path);

  std::vector<std::string> missing;
  for (const CaseEntry& entry : m.cases) {
    if (!entry.gold.has_value()) {
      throw ValidationError("case '" + entry.case_id +
                            "' has no reference mask; evaluation requires one per case");
    }
    const std::string p = pred_dir + "/" + entry.case_id + ".rvol";
    if (!std::filesystem::exists(p)) missing.push_back(p);
  }
  detail::require_all_present(missing, "prediction masks");

  std::vector<std::string> ids;
  std::vector<Mask> preds;
  std::vector<Mask> golds;
  for (const CaseEntry& entry : m.cases) {
    ids.push_back(entry.case_id);
    preds.push_back(load_mask(pred_dir + "/" + entry.case_id + ".rvol"));
    golds.push_back(load_case(m, entry).gold.value());
  }
  const metrics::EvaluationReport report =
      metrics::evaluate_cases(ids, preds, golds, cfg.score.hd_max);
  report.write_csv(out_base + ".csv");
  detail::write_text_file(out_base + ".json", report.to_json().dump(2) + "\n");
  out << "evaluated " << ids.size() << " cases -> " << out_base << ".csv\n";
  out << "  dsc " << detail::format_aggregate(report.dsc_aggregate()) << "\n";
  out << "  ppv " << detail::format_aggregate(report.ppv_aggregate()) << "\n";
  out << "  sensitivity " << detail::format_aggregate(report.sensitivity_aggregate()) << "\n";
  out << "  hd " << detail::format_aggregate(report.hd_aggregate()) << "\n";
}

inline void run_cv(const PipelineConfig& cfg, std::ostream& out) {
  const CvResult res = run_fold_cv(cfg);
  for (const FoldResult& fr : res.folds) {
    out << "fold " << fr.fold << ": " << fr.held_out.size() << " held-out cases";
    if (fr.resumed) {
      out << " (resumed)";
    } else {
      out << ", " << fr.history.rows.size() << " epochs (best " << fr.history.best_epoch << ")";
    }
    out << "\n";
  }
  out << "postprocessing: threshold " << res.params.threshold << ", min lesion size "
      << res.params.min_lesion_size << " (mean combined score " << res.grid_score << ")\n";
  out << "report -> " << res.report_csv_path << "\n";
  out << "  dsc " << detail::format_aggregate(res.report.dsc_aggregate()) << "\n";
  out << "  ppv " << detail::format_aggregate(res.report.ppv_aggregate()) << "\n";
  out << "  sensitivity " << detail::format_aggregate(res.report.sensitivity_aggregate()) << "\n";
  out << "  hd " << detail::format_aggregate(res.report.hd_aggregate()) << "\n";
}

// Argument surface: every subcommand optionally reads one pipeline config
// file; explicit flags override config fields. Exit codes: 0 success,
// 1 rejected input, 2 runtime failure.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"volumetric lesion segmentation pipeline"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::string manifest;
    std::string out_path;
    std::optional<std::uint64_t> seed;
  };

  const auto add_common = [](CLI::App* sub, Common& c, bool with_out) {
    sub->add_option("--config", c.config, "pipeline config JSON file");
    sub->add_option("--manifest", c.manifest, "dataset manifest path");
    if (with_out) sub->add_option("--out", c.out_path, "output directory");
    sub->add_option("--seed", c.seed, "override the global seed");
  };

  const auto make_config = [](const Common& c) {
    PipelineConfig cfg;
    if (!c.config.empty()) {
      detail::require_file(c.config, "config file");
      cfg = PipelineConfig::load(c.config);
    }
    if (!c.manifest.empty()) cfg.manifest_path = c.manifest;
    if (!c.out_path.empty()) cfg.output_dir = c.out_path;
    if (c.seed) cfg.seed = *c.seed;
    return cfg;
  };

  // synth
  auto synth_spec = std::make_shared<std::string>();
  auto synth_out = std::make_shared<std::string>();
  auto synth_seed = std::make_shared<std::optional<std::uint64_t>>();
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  synth->add_option("--spec", *synth_spec, "dataset spec JSON file");
  synth->add_option("--out", *synth_out, "dataset directory")->required();
  synth->add_option("--seed", *synth_seed, "override the spec seed");
  synth->callback([=, &out] { run_synth(*synth_spec, *synth_out, *synth_seed, out); });

  // preprocess
  auto pre_common = std::make_shared<Common>();
  CLI::App* pre = app.add_subcommand("preprocess", "apply symmetric modality augmentation");
  add_common(pre, *pre_common, true);
  pre->callback([=, &out] { run_preprocess(make_config(*pre_common), out); });

  // sample
  auto sample_common = std::make_shared<Common>();
  auto sample_out = std::make_shared<std::string>();
  CLI::App* sample = app.add_subcommand("sample", "build a balanced patch cache");
  add_common(sample, *sample_common, false);
  sample->add_option("--out", *sample_out, "patch cache base path")->required();
  sample->callback([=, &out] { run_sample(make_config(*sample_common), *sample_out, out); });

  // train
  auto train_common = std::make_shared<Common>();
  auto train_patches = std::make_shared<std::string>();
  auto train_out = std::make_shared<std::string>();
  auto train_history = std::make_shared<std::string>();
  CLI::App* train = app.add_subcommand("train", "train one network on a patch cache");
  add_common(train, *train_common, false);
  train->add_option("--patches", *train_patches, "patch cache base path")->required();
  train->add_option("--out", *train_out, "weights output path")->required();
  train->add_option("--history", *train_history, "epoch history CSV path");
  train->callback([=, &out] {
    run_train(make_config(*train_common), *train_patches, *train_out, *train_history, out);
  });

  // predict
  auto predict_common = std::make_shared<Common>();
  auto predict_weights = std::make_shared<std::vector<std::string>>();
  auto predict_out = std::make_shared<std::string>();
  auto predict_params = std::make_shared<std::string>();
  auto predict_masks = std::make_shared<std::string>();
  CLI::App* predict = app.add_subcommand("predict", "write ensemble probability maps");
  add_common(predict, *predict_common, false);
  predict->add_option("--weights", *predict_weights, "weight file (repeat to ensemble)")
      ->required();
  predict->add_option("--out", *predict_out, "probability map directory")->required();
  CLI::Option* params_opt =
      predict->add_option("--params", *predict_params, "operating point JSON; also write masks");
  CLI::Option* masks_opt =
      predict->add_option("--masks", *predict_masks, "binarized mask directory");
  params_opt->needs(masks_opt);
  masks_opt->needs(params_opt);
  predict->callback([=, &out] {
    run_predict(make_config(*predict_common), *predict_weights, *predict_out, *predict_params,
                *predict_masks, out);
  });

  // gridsearch
  auto grid_common = std::make_shared<Common>();
  auto grid_maps = std::make_shared<std::string>();
  auto grid_out = std::make_shared<std::string>();
  CLI::App* grid = app.add_subcommand("gridsearch", "search the operating point on saved maps");
  add_common(grid, *grid_common, false);
  grid->add_option("--maps", *grid_maps, "probability map directory")->required();
  grid->add_option("--out", *grid_out, "parameter JSON output path")->required();
  grid->callback(
      [=, &out] { run_gridsearch(make_config(*grid_common), *grid_maps, *grid_out, out); });

  // evaluate
  auto eval_common = std::make_shared<Common>();
  auto eval_pred = std::make_shared<std::string>();
  auto eval_out = std::make_shared<std::string>();
  CLI::App* evaluate = app.add_subcommand("evaluate", "score predicted masks against references");
  add_common(evaluate, *eval_common, false);
  evaluate->add_option("--pred", *eval_pred, "predicted mask directory")->required();
  evaluate->add_option("--out", *eval_out, "report base path (.csv/.json appended)")->required();
  evaluate->callback(
      [=, &out] { run_evaluate(make_config(*eval_common), *eval_pred, *eval_out, out); });

  // cv
  auto cv_common = std::make_shared<Common>();
  CLI::App* cv = app.add_subcommand("cv", "run the full cross-validated pipeline");
  add_common(cv, *cv_common, true);
  cv->callback([=, &out] { run_cv(make_config(*cv_common), out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace voxseg::cli
