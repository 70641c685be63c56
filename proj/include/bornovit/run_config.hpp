#pragma once

#include "bornovit/data.hpp"
#include "bornovit/model.hpp"
#include "bornovit/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>

namespace bornovit {

struct DataConfig {
  std::filesystem::path root_dir;
  std::optional<std::filesystem::path> manifest;
};

struct ModeConfig {
  bool deterministic = true;
  bool stratified_folds = false;
  bool parallel_folds = false;
};

/// Everything a `train` run needs. Parsed from JSON with defaults for every
/// missing field; unknown keys and mistyped values are ConfigErrors that name
/// the field path ("train.learning_rate").
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  DataConfig data;
  std::filesystem::path output_dir = "runs";
  ModeConfig mode;
  // False when the file sets model.num_classes; otherwise the dataset decides.
  bool num_classes_from_data = true;

  /// Value ranges of every section. Throws ConfigError.
  void validate() const;
  /// Throws DataError naming the first referenced path that does not exist.
  void check_paths() const;

  nlohmann::json to_json() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
/// Throws DataError if the file cannot be read, ConfigError if it is not
/// valid JSON or fails the schema.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace bornovit
