#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "voxseg/pipeline.hpp"
#include "voxseg/synthetic.hpp"

using namespace voxseg;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<std::string> numbered_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "c%02d", i);
    ids.emplace_back(buf);
  }
  return ids;
}

cli::SyntheticSpec tiny_dataset_spec() {
  cli::SyntheticSpec spec;
  spec.shape = {32, 32, 24};
  spec.num_cases = 4;
  spec.num_modalities = 1;
  spec.lesions_per_case = 1;
  spec.lesion_radius_min = 3;
  spec.lesion_radius_max = 4;
  spec.contrast = 0.6;
  spec.noise_level = 0.02;
  spec.seed = 5;
  return spec;
}

cli::PipelineConfig tiny_pipeline_config(const std::string& manifest, const std::string& out_dir) {
  cli::PipelineConfig cfg;
  cfg.manifest_path = manifest;
  cfg.output_dir = out_dir;
  cfg.fold_count = 2;
  cfg.seed = 99;
  cfg.registration.mode = preprocess::RegistrationMode::none;
  cfg.sampler.patch_size = {8, 8, 8};
  cfg.sampler.goal_per_case = 24;
  cfg.sampler.max_offset = {4, 4, 4};
  cfg.sampler.validation_fraction = 0.25;
  cfg.network.in_channels = 2;
  cfg.network.num_classes = 2;
  cfg.network.base_filters = 2;
  cfg.network.resolution_steps = 2;
  cfg.network.dropout_rate = 0.0f;
  cfg.trainer.batch_size = 8;
  cfg.trainer.max_epochs = 2;
  cfg.infer.patch_size = {8, 8, 8};
  cfg.infer.extraction_step = {4, 4, 4};
  cfg.infer.batch_size = 4;
  cfg.grid.thresholds = {0.3, 0.5};
  cfg.grid.min_sizes = {1, 20};
  return cfg;
}

cli::PipelineConfig full_nondefault_config() {
  cli::PipelineConfig cfg;
  cfg.manifest_path = "data/manifest.json";
  cfg.output_dir = "runs/a";
  cfg.fold_count = 3;
  cfg.seed = 42;
  cfg.registration.mode = preprocess::RegistrationMode::none;
  cfg.registration.pyramid_levels = 2;
  cfg.registration.max_iterations = 50;
  cfg.registration.step_size = 1.5;
  cfg.registration.tolerance = 1e-5;
  cfg.registration.fill_value = 0.5f;
  cfg.registration.transform_path = "t.json";
  cfg.sampler.patch_size = {16, 16, 8};
  cfg.sampler.goal_per_case = 77;
  cfg.sampler.lesion_fraction = 0.4;
  cfg.sampler.max_offset = {8, 8, 4};
  cfg.sampler.validation_fraction = 0.1;
  cfg.network.in_channels = 4;
  cfg.network.num_classes = 2;
  cfg.network.base_filters = 4;
  cfg.network.resolution_steps = 3;
  cfg.network.dropout_rate = 0.1f;
  cfg.trainer.batch_size = 4;
  cfg.trainer.patience = 3;
  cfg.trainer.max_epochs = 7;
  cfg.trainer.rho = 0.9;
  cfg.trainer.epsilon = 1e-5;
  cfg.focal.gamma = 1.5f;
  cfg.focal.alpha = {0.3f, 0.7f};
  cfg.infer.patch_size = {16, 16, 8};
  cfg.infer.extraction_step = {8, 8, 4};
  cfg.infer.batch_size = 2;
  cfg.score.hd_max = 150.0;
  cfg.grid.thresholds = {0.2, 0.4};
  cfg.grid.min_sizes = {5, 50};
  return cfg;
}

}  // namespace

TEST_CASE("fold_split partitions cases evenly and deterministically") {
  const std::vector<std::string> ids = numbered_ids(28);
  const auto folds = cli::fold_split(ids, 4, 123);

  REQUIRE(folds.size() == 4);
  std::set<std::string> seen;
  for (const auto& fold : folds) {
    CHECK(fold.size() == 7);
    for (const std::string& id : fold) {
      CHECK(seen.insert(id).second);
    }
  }
  CHECK(seen.size() == ids.size());

  CHECK(cli::fold_split(ids, 4, 123) == folds);
  CHECK(cli::fold_split(ids, 4, 124) != folds);

  std::vector<std::string> reversed(ids.rbegin(), ids.rend());
  CHECK(cli::fold_split(reversed, 4, 123) == folds);
}

TEST_CASE("fold_split sizes differ by at most one when counts are uneven") {
  const auto folds = cli::fold_split(numbered_ids(10), 4, 7);
  std::vector<std::size_t> sizes;
  for (const auto& fold : folds) sizes.push_back(fold.size());
  const std::vector<std::size_t> expected{3, 3, 2, 2};
  CHECK(sizes == expected);
}

TEST_CASE("fold_split rejects bad inputs") {
  CHECK_THROWS_AS(cli::fold_split(numbered_ids(8), 1, 0), ValidationError);
  CHECK_THROWS_AS(cli::fold_split(numbered_ids(3), 4, 0), ValidationError);
  CHECK_THROWS_WITH(cli::fold_split({"x", "x"}, 2, 0), ContainsSubstring("duplicate"));
}

TEST_CASE("pipeline config json round trip preserves every field") {
  const cli::PipelineConfig cfg = full_nondefault_config();
  cfg.validate();
  const cli::PipelineConfig back = cli::PipelineConfig::from_json(cfg.to_json());

  CHECK(back.manifest_path == cfg.manifest_path);
  CHECK(back.output_dir == cfg.output_dir);
  CHECK(back.fold_count == cfg.fold_count);
  CHECK(back.seed == cfg.seed);
  CHECK(back.registration.mode == cfg.registration.mode);
  CHECK(back.registration.pyramid_levels == cfg.registration.pyramid_levels);
  CHECK(back.registration.max_iterations == cfg.registration.max_iterations);
  CHECK(back.registration.step_size == cfg.registration.step_size);
  CHECK(back.registration.tolerance == cfg.registration.tolerance);
  CHECK(back.registration.fill_value == cfg.registration.fill_value);
  CHECK(back.registration.transform_path == cfg.registration.transform_path);
  CHECK(back.sampler.patch_size == cfg.sampler.patch_size);
  CHECK(back.sampler.goal_per_case == cfg.sampler.goal_per_case);
  CHECK(back.sampler.lesion_fraction == cfg.sampler.lesion_fraction);
  CHECK(back.sampler.max_offset == cfg.sampler.max_offset);
  CHECK(back.sampler.validation_fraction == cfg.sampler.validation_fraction);
  CHECK(back.network == cfg.network);
  CHECK(back.trainer.batch_size == cfg.trainer.batch_size);
  CHECK(back.trainer.patience == cfg.trainer.patience);
  CHECK(back.trainer.max_epochs == cfg.trainer.max_epochs);
  CHECK(back.trainer.rho == cfg.trainer.rho);
  CHECK(back.trainer.epsilon == cfg.trainer.epsilon);
  CHECK(back.focal.gamma == cfg.focal.gamma);
  CHECK(back.focal.alpha == cfg.focal.alpha);
  CHECK(back.infer.patch_size == cfg.infer.patch_size);
  CHECK(back.infer.extraction_step == cfg.infer.extraction_step);
  CHECK(back.infer.batch_size == cfg.infer.batch_size);
  CHECK(back.score.hd_max == cfg.score.hd_max);
  CHECK(back.grid.thresholds == cfg.grid.thresholds);
  CHECK(back.grid.min_sizes == cfg.grid.min_sizes);
  CHECK(back.hash() == cfg.hash());
}

TEST_CASE("pipeline config parsing applies defaults and rejects malformed input") {
  const cli::PipelineConfig defaults = cli::PipelineConfig::from_json(nlohmann::json::object());
  CHECK(defaults.fold_count == 4);
  CHECK(defaults.network == model::NetworkConfig{});
  CHECK(defaults.grid.thresholds == inference::ParamGrid::defaults().thresholds);

  CHECK_THROWS_AS(cli::PipelineConfig::from_json({{"fold_count", "three"}}),
                  ValidationError);
  CHECK_THROWS_WITH(
      cli::PipelineConfig::from_json({{"registration", {{"mode", "affine"}}}}),
      ContainsSubstring("registration mode"));
}

TEST_CASE("pipeline config file save and load round trip") {
  vtest::TempDir tmp;
  const cli::PipelineConfig cfg = full_nondefault_config();
  const std::string path = tmp.file("cfg.json");
  cfg.save(path);
  const cli::PipelineConfig loaded = cli::PipelineConfig::load(path);
  CHECK(loaded.hash() == cfg.hash());
  CHECK(loaded.output_dir == cfg.output_dir);
  CHECK_THROWS_AS(cli::PipelineConfig::load(tmp.file("absent.json")), IoError);
}

TEST_CASE("config hash ignores the output directory and tracks content") {
  CHECK(cli::detail::fnv1a_hex("") == "cbf29ce484222325");

  const cli::PipelineConfig cfg = full_nondefault_config();
  cli::PipelineConfig moved = cfg;
  moved.output_dir = "somewhere/else";
  CHECK(moved.hash() == cfg.hash());

  cli::PipelineConfig reseeded = cfg;
  reseeded.seed += 1;
  CHECK(reseeded.hash() != cfg.hash());

  cli::PipelineConfig regridded = cfg;
  regridded.grid.thresholds = {0.25, 0.4};
  CHECK(regridded.hash() != cfg.hash());
}

TEST_CASE("pipeline config validation catches inconsistent settings") {
  cli::PipelineConfig cfg = full_nondefault_config();

  SECTION("fold count floor") {
    cfg.fold_count = 1;
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("fold_count"));
  }
  SECTION("patch size must match the network stride") {
    cfg.sampler.patch_size = {20, 20, 16};
    cfg.sampler.max_offset = {10, 10, 8};
    cfg.infer.patch_size = {20, 20, 16};
    cfg.network.resolution_steps = 4;
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("divisible"));
  }
  SECTION("sampler and inference patch sizes must agree") {
    cfg.infer.patch_size = {24, 24, 8};
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("must match"));
  }
  SECTION("postprocessing is two-class") {
    cfg.network.num_classes = 3;
    cfg.focal.alpha = {0.2f, 0.3f, 0.5f};
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("2 classes"));
  }
}

TEST_CASE("cross-validation run produces a complete artifact tree") {
  vtest::TempDir tmp;
  const std::string data_dir = tmp.file("data");
  cli::write_synthetic_dataset(tiny_dataset_spec(), data_dir);
  const std::string manifest = data_dir + "/manifest.json";

  const cli::PipelineConfig cfg = tiny_pipeline_config(manifest, tmp.file("run_a"));
  const cli::CvResult res = cli::run_fold_cv(cfg);

  REQUIRE(res.folds.size() == 2);
  std::set<std::string> held;
  for (const cli::FoldResult& fr : res.folds) {
    CHECK(fr.held_out.size() == 2);
    CHECK_FALSE(fr.resumed);
    CHECK_FALSE(fr.history.rows.empty());
    CHECK(std::filesystem::exists(fr.weights_path));
    for (const std::string& id : fr.held_out) held.insert(id);
  }
  CHECK(held.size() == 4);

  namespace fs = std::filesystem;
  const fs::path out(cfg.output_dir);
  CHECK(fs::exists(out / "config.json"));
  CHECK(fs::exists(out / "folds.json"));
  CHECK(fs::exists(out / "postprocess.json"));
  CHECK(fs::exists(out / "report.csv"));
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "fold_0" / "history.csv"));
  CHECK(fs::exists(out / "fold_0" / "patches.json"));
  CHECK(fs::exists(out / "fold_0" / "patches.bin"));
  for (const std::string& id : held) {
    CHECK(fs::exists(out / "masks" / (id + ".rvol")));
  }
  for (const cli::FoldResult& fr : res.folds) {
    for (const std::string& id : fr.held_out) {
      CHECK(fs::exists(out / ("fold_" + std::to_string(fr.fold)) / "maps" / (id + ".json")));
      CHECK(fs::exists(out / ("fold_" + std::to_string(fr.fold)) / "maps" / (id + ".bin")));
    }
  }

  REQUIRE(res.report.rows.size() == 4);
  for (const metrics::CaseMetrics& row : res.report.rows) {
    CHECK(row.dsc >= 0.0);
    CHECK(row.dsc <= 1.0);
    CHECK(held.count(row.case_id) == 1);
  }
  CHECK(res.grid_score >= 0.0);
  CHECK(res.grid_score <= 0.5);

  const nlohmann::json pp = cli::detail::parse_json_file((out / "postprocess.json").string());
  CHECK(inference::PostprocessParams::from_json(pp.at("params")) == res.params);

  const metrics::EvaluationReport reread =
      metrics::EvaluationReport::read_csv((out / "report.csv").string(), cfg.score.hd_max);
  CHECK(reread.rows == res.report.rows);
}

TEST_CASE("cross-validation is deterministic across output directories and resumable in place") {
  vtest::TempDir tmp;
  const std::string data_dir = tmp.file("data");
  cli::write_synthetic_dataset(tiny_dataset_spec(), data_dir);
  const std::string manifest = data_dir + "/manifest.json";

  cli::PipelineConfig cfg_a = tiny_pipeline_config(manifest, tmp.file("run_a"));
  cli::PipelineConfig cfg_b = tiny_pipeline_config(manifest, tmp.file("run_b"));
  const cli::CvResult res_a = cli::run_fold_cv(cfg_a);
  const cli::CvResult res_b = cli::run_fold_cv(cfg_b);

  CHECK(res_a.report.rows == res_b.report.rows);
  CHECK(res_a.params == res_b.params);
  CHECK(res_a.grid_score == res_b.grid_score);

  const cli::CvResult res_r = cli::run_fold_cv(cfg_a);
  for (const cli::FoldResult& fr : res_r.folds) {
    CHECK(fr.resumed);
    CHECK(fr.history.rows.empty());
  }
  CHECK(res_r.report.rows == res_a.report.rows);
  CHECK(res_r.params == res_a.params);
  CHECK(res_r.grid_score == res_a.grid_score);

  cli::PipelineConfig clashing = cfg_a;
  clashing.seed += 1;
  CHECK_THROWS_WITH(cli::run_fold_cv(clashing), ContainsSubstring("different configuration"));
}

TEST_CASE("cross-validation rejects broken inputs with stage context") {
  vtest::TempDir tmp;
  const std::string data_dir = tmp.file("data");
  const Manifest written = cli::write_synthetic_dataset(tiny_dataset_spec(), data_dir);
  const std::string manifest = data_dir + "/manifest.json";

  SECTION("missing reference mask") {
    Manifest broken = written;
    broken.cases[0].gold.reset();
    const std::string path = data_dir + "/manifest_nogold.json";
    save_manifest(broken, path);
    const cli::PipelineConfig cfg = tiny_pipeline_config(path, tmp.file("run_nogold"));
    CHECK_THROWS_WITH(cli::run_fold_cv(cfg), ContainsSubstring("reference mask"));
  }
  SECTION("missing volume file fails pre-flight") {
    Manifest broken = written;
    broken.cases[0].modalities[0].path = "absent.rvol";
    const std::string path = data_dir + "/manifest_absent.json";
    save_manifest(broken, path);
    const cli::PipelineConfig cfg = tiny_pipeline_config(path, tmp.file("run_absent"));
    CHECK_THROWS_WITH(cli::run_fold_cv(cfg),
                      ContainsSubstring("stage 'load'") && ContainsSubstring("missing files"));
  }
  SECTION("channel count mismatch after augmentation") {
    cli::PipelineConfig cfg = tiny_pipeline_config(manifest, tmp.file("run_chan"));
    cfg.network.in_channels = 3;
    CHECK_THROWS_WITH(cli::run_fold_cv(cfg), ContainsSubstring("input channels"));
  }
  SECTION("more folds than cases") {
    cli::PipelineConfig cfg = tiny_pipeline_config(manifest, tmp.file("run_folds"));
    cfg.fold_count = 5;
    CHECK_THROWS_WITH(cli::run_fold_cv(cfg), ContainsSubstring("cannot split"));
  }
}
