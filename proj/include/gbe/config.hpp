#pragma once

// Experiment configuration: one strict JSON document covering scene
// generation, model sizes, training, metrics and input paths. Unknown keys
// and wrongly typed values are rejected with the dotted key path.

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "gbe/trainer.hpp"

namespace gbe {

struct KidConfig {
  int subset_size = 100;
  int n_subsets = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;

  LayoutConfig scenes;
  int n_source = 200;
  int n_target = 200;

  ModelConfig model = toy_model_config();
  std::string condition = "ours";
  TrainConfig train = toy_train_config();

  BackboneConfig metric_backbone;
  KidConfig kid;
  SkvdConfig skvd;
  int layout_grid = 16;

  // Inputs. Empty means "not given"; relative paths resolve against the config file.
  std::filesystem::path source_data;
  std::filesystem::path target_data;
  std::filesystem::path enhanced_data;
  std::filesystem::path features;
  std::filesystem::path labels;
  std::filesystem::path checkpoint;

  ExperimentConfig();
  /// Range checks of every section; throws ConfigError.
  void validate() const;
  /// Throws ConfigError naming the first referenced input path that does not exist.
  void check_paths() const;
};

/// Strict parse. `base` anchors relative paths.
ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base = {});
/// Reads and parses a file; syntax errors become ConfigError.
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
/// Full resolved configuration, accepted back by parse_experiment_config.
nlohmann::json to_json(const ExperimentConfig& cfg);

}  // namespace gbe
