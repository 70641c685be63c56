#pragma once

#include "bornovit/data.hpp"
#include "bornovit/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace bornovit {

struct OptimizerConfig {
  std::string name = "adam";  // "adam" or "sgd"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;  // sgd only
};

struct TrainConfig {
  double learning_rate = 1e-4;
  Index batch_size = 128;
  Index max_epochs = 100;
  Index patience_limit = 10;
  Index k_folds = 5;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  bool deterministic = true;

  /// Throws ConfigError with the offending "train.*" field.
  void validate() const;
};

/// Per-parameter moment buffers, aligned with ViTParams::named() order.
struct OptimizerState {
  Index step = 0;
  std::vector<Eigen::ArrayXf> m;
  std::vector<Eigen::ArrayXf> v;
};

/// One update of every tensor from its .grad(). Adam uses bias-corrected
/// moments; SGD uses optional heavy-ball momentum. Throws ContractError naming
/// the first tensor without a gradient.
void optimizer_step(const std::vector<NamedTensor<float>>& params, OptimizerState& state, const TrainConfig& cfg);
void optimizer_step(const ViTParams<float>& params, OptimizerState& state, const TrainConfig& cfg);

struct EarlyStopState {
  double best_val_loss = std::numeric_limits<double>::infinity();
  Index consecutive_bad_epochs = 0;
  Index best_epoch = -1;
  std::optional<ViTParams<float>> best_params;
};

enum class StopDecision { Continue, Stop };

/// Strict improvement resets the counter and snapshots `params` (when given);
/// anything else counts as a bad epoch. Stops once the counter reaches
/// `patience_limit`. Throws NumericalError on a NaN or infinite loss.
StopDecision early_stop_update(EarlyStopState& state, double val_loss, Index epoch, Index patience_limit,
                               const ViTParams<float>* params = nullptr);

struct Checkpoint {
  ModelConfig model;
  std::vector<std::string> class_names;
  std::string normalization = "unit_scale";  // pixels / 255, no mean/std
  Index epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
  std::uint64_t seed = 0;
  ViTParams<float> params;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError (with byte offset) on bad magic, unknown version,
/// truncation, malformed metadata or tensors that disagree with the config.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws DataError if the file cannot be read, FormatError if it is malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochMetrics {
  Index epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  Index patience = 0;
  bool improved = false;

  nlohmann::json to_json() const;
};

struct FoldResult {
  Index rotation = 0;
  Checkpoint best;  // snapshot from the best validation epoch
  std::vector<EpochMetrics> log;
  Index epochs_trained = 0;
  bool early_stopped = false;
};

/// Trains on `roles.train`, early-stops on `roles.validation`. Each epoch
/// shuffles the training indices, runs mini-batches (the last one may be
/// short) with per-sample augmentation drawn from (seed, rotation, epoch,
/// sample), then evaluates the validation split in eval mode. One JSON record
/// per epoch goes to `log` when given. Throws ConfigError on an empty split.
FoldResult train_fold(const ViTParams<float>& initial, const PreparedData& data, const FoldRoles& roles,
                      Index rotation, const TrainConfig& cfg, const AugmentConfig& augment_cfg,
                      std::ostream* log = nullptr);

struct KFoldOptions {
  bool stratified = false;
  bool parallel = false;
  std::optional<ViTParams<float>> pretrained;  // backbone to start every fold from
  std::ostream* log = nullptr;
};

struct FoldSummary {
  Index rotation = 0;
  Index epochs_trained = 0;
  Index best_epoch = 0;
  double best_val_loss = 0.0;
  double test_accuracy = 0.0;
  Index test_samples = 0;
  bool early_stopped = false;
};

struct KFoldResult {
  FoldSplit split;
  std::vector<FoldResult> folds;
  std::vector<FoldSummary> summaries;
  double mean_test_accuracy = 0.0;
  double std_test_accuracy = 0.0;  // population standard deviation

  nlohmann::json summary_json() const;
};

/// k rotations of train_fold, each evaluated once on its test fold. Fold
/// models start from init_params(model, derive_seed(seed, {rotation})) or from
/// the pretrained backbone with a re-initialized head.
KFoldResult run_kfold(const PreparedData& data, const ModelConfig& model, const TrainConfig& cfg,
                      const AugmentConfig& augment_cfg, const KFoldOptions& options = {});

}  // namespace bornovit
