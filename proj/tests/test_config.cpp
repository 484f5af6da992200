#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gbe/config.hpp"

using namespace gbe;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
  try {
    (void)parse_experiment_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("an empty document yields the defaults") {
  const auto cfg = parse_experiment_config(json::object());
  const ExperimentConfig defaults;
  CHECK(to_json(cfg) == to_json(defaults));
  CHECK(cfg.condition == "ours");
  CHECK(cfg.train.lpips_weight == 5.0);
  CHECK(cfg.train.gp_weight == 0.06);
}

TEST_CASE("serialised configs parse back to the same document") {
  json j = {{"seed", 17},
            {"scenes", {{"n_source", 12}, {"target_style", {{"tint", {1.1, 1.0, 0.9}}}}}},
            {"model", {{"discriminator", {{"width", 16}, {"projection", false}}}}},
            {"sampler", {{"condition", "unif-crop-48"}, {"threshold", 0.4}}},
            {"train", {{"lr0", 2e-4}, {"throttle", {{"gain", 3.0}}}}},
            {"metrics", {{"skvd", {{"patch_divisor", 8}}}}}};
  const auto cfg = parse_experiment_config(j);
  CHECK(cfg.seed == 17);
  CHECK(cfg.n_source == 12);
  CHECK(cfg.scenes.target_style.tint[0] == 1.1);
  CHECK(cfg.model.discriminator.width == 16);
  CHECK_FALSE(cfg.model.discriminator.projection);
  CHECK(cfg.condition == "unif-crop-48");
  CHECK(cfg.train.throttle.gain == 3.0);
  CHECK(cfg.skvd.patch_divisor == 8);
  const json dumped = to_json(cfg);
  CHECK(to_json(parse_experiment_config(dumped)) == dumped);
}

TEST_CASE("unknown keys are rejected with their full path") {
  CHECK(config_error({{"sede", 1}}).find("'sede'") != std::string::npos);
  CHECK(config_error({{"train", {{"throttle", {{"gian", 1.0}}}}}}).find("'train.throttle.gian'") != std::string::npos);
  CHECK(config_error({{"model", {{"enhancer", {{"depth", 3}}}}}}).find("'model.enhancer.depth'") != std::string::npos);
}

TEST_CASE("wrongly typed values name the field") {
  CHECK(config_error({{"seed", -1}}).find("seed") != std::string::npos);
  CHECK(config_error({{"train", {{"total_iters", 1.5}}}}).find("train.total_iters") != std::string::npos);
  CHECK(config_error({{"train", {{"lr0", "fast"}}}}).find("train.lr0") != std::string::npos);
  CHECK(config_error({{"model", {{"backbone", {{"widths", {8, "x"}}}}}}}).find("model.backbone.widths[1]") !=
        std::string::npos);
  CHECK(config_error({{"scenes", {{"source_style", {{"tint", {1.0, 1.0}}}}}}}).find("tint") != std::string::npos);
  CHECK_FALSE(config_error({{"train", 3}}).empty());
}

TEST_CASE("out-of-range values are configuration errors") {
  CHECK_FALSE(config_error({{"sampler", {{"condition", "bogus"}}}}).empty());
  CHECK_FALSE(config_error({{"train", {{"batch_size", 4}}}}).empty());
  CHECK_FALSE(config_error({{"metrics", {{"skvd", {{"min_matches", 256}}}}}}).empty());
  CHECK_FALSE(config_error({{"scenes", {{"n_target", 0}}}}).empty());
}

TEST_CASE("relative paths resolve against the config file and must exist") {
  const auto dir = std::filesystem::temp_directory_path() / "gbe_config_test";
  std::filesystem::create_directories(dir / "data");
  const auto file = dir / "experiment.json";
  std::ofstream(file) << R"({"paths": {"source": "data", "target": "missing"}})";
  const auto cfg = load_experiment_config(file);
  CHECK(cfg.source_data == (dir / "data").lexically_normal());
  CHECK_THROWS_WITH_AS(cfg.check_paths(), doctest::Contains("paths.target"), ConfigError);

  std::ofstream(file) << "{ not json";
  CHECK_THROWS_AS(load_experiment_config(file), ConfigError);
  CHECK_THROWS_AS(load_experiment_config(dir / "absent.json"), ConfigError);
}
