#include "bornovit/trainer.hpp"

#include "bornovit/errors.hpp"
#include "bornovit/evaluator.hpp"
#include "bornovit/ops.hpp"
#include "bornovit/random.hpp"

#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace bornovit {

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& field, const std::string& msg) {
    if (!ok) throw ConfigError("train." + field + ": " + msg);
  };
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "learning_rate", "must be finite and non-negative");
  require(batch_size > 0, "batch_size", "must be positive");
  require(max_epochs > 0, "max_epochs", "must be positive");
  require(patience_limit > 0, "patience_limit", "must be positive");
  require(k_folds >= 3, "k_folds", "must be at least 3");
  require(optimizer.name == "adam" || optimizer.name == "sgd", "optimizer.name",
          "unknown optimizer '" + optimizer.name + "' (expected adam or sgd)");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1", "must lie in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2", "must lie in [0, 1)");
  require(optimizer.eps > 0.0, "optimizer.eps", "must be positive");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0, "optimizer.momentum", "must lie in [0, 1)");
}

void optimizer_step(const std::vector<NamedTensor<float>>& params, OptimizerState& state, const TrainConfig& cfg) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw ContractError("optimizer_step: no gradient for " + name);
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Eigen::ArrayXf::Zero(p.tensor.numel()));
      state.v.push_back(Eigen::ArrayXf::Zero(p.tensor.numel()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  ++state.step;
  const auto& o = cfg.optimizer;
  const auto lr = static_cast<float>(cfg.learning_rate);
  const double t = static_cast<double>(state.step);
  const auto bc1 = static_cast<float>(1.0 - std::pow(o.beta1, t));
  const auto bc2 = static_cast<float>(1.0 - std::pow(o.beta2, t));
  const auto b1 = static_cast<float>(o.beta1), b2 = static_cast<float>(o.beta2), eps = static_cast<float>(o.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    auto& p = tensor.mutable_data();
    const auto& g = tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ContractError("optimizer state size mismatch for " + params[i].name);
    if (o.name == "adam") {
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.square();
      p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    } else if (o.momentum > 0.0) {
      m = static_cast<float>(o.momentum) * m + g;
      p -= lr * m;
    } else {
      p -= lr * g;
    }
  }
}

void optimizer_step(const ViTParams<float>& params, OptimizerState& state, const TrainConfig& cfg) {
  optimizer_step(params.named(), state, cfg);
}

StopDecision early_stop_update(EarlyStopState& state, double val_loss, Index epoch, Index patience_limit,
                               const ViTParams<float>* params) {
  if (!std::isfinite(val_loss)) {
    throw NumericalError("validation loss is " + std::to_string(val_loss) + " at epoch " + std::to_string(epoch) +
                         "; training aborted");
  }
  if (val_loss < state.best_val_loss) {
    state.best_val_loss = val_loss;
    state.best_epoch = epoch;
    state.consecutive_bad_epochs = 0;
    if (params) state.best_params = params->clone();
  } else {
    ++state.consecutive_bad_epochs;
  }
  return state.consecutive_bad_epochs >= patience_limit ? StopDecision::Stop : StopDecision::Continue;
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},       {"train_loss", train_loss}, {"train_accuracy", train_accuracy},
          {"val_loss", val_loss}, {"val_accuracy", val_accuracy}, {"patience", patience},
          {"improved", improved}};
}

namespace {

// Stream tags keep the derived seeds of different consumers apart.
constexpr std::uint64_t kShuffleTag = 1, kAugmentTag = 2, kDropoutTag = 3, kInitTag = 4, kHeadTag = 5;

}  // namespace

FoldResult train_fold(const ViTParams<float>& initial, const PreparedData& data, const FoldRoles& roles,
                      Index rotation, const TrainConfig& cfg, const AugmentConfig& augment_cfg, std::ostream* log) {
  cfg.validate();
  augment_cfg.validate();
  if (roles.train.empty()) throw ConfigError("train split is empty");
  if (roles.validation.empty()) throw ConfigError("validation split is empty");
  const Index C = initial.config.num_classes;
  for (int y : data.labels) {
    if (y < 0 || y >= C) throw ConfigError("label " + std::to_string(y) + " does not fit a " + std::to_string(C) + "-class model");
  }

  const auto params = initial.clone();
  params.set_requires_grad(true);
  OptimizerState opt;
  EarlyStopState stop;
  FoldResult result;
  result.rotation = rotation;
  const auto seed = cfg.seed;
  const auto r = static_cast<std::uint64_t>(rotation);

  for (Index epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    std::vector<Index> order = roles.train;
    std::mt19937_64 shuffle_rng(derive_seed(seed, {kShuffleTag, r, e}));
    shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    Index correct = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++b) {
      const auto n = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor<float>> images;
      std::vector<int> y;
      for (std::size_t j = 0; j < n; ++j) {
        const Index i = order[start + j];
        std::mt19937_64 aug_rng(derive_seed(seed, {kAugmentTag, r, e, static_cast<std::uint64_t>(i)}));
        images.push_back(augment(data.inputs[static_cast<std::size_t>(i)], augment_cfg, aug_rng));
        y.push_back(data.labels[static_cast<std::size_t>(i)]);
      }
      std::vector<Index> all(n);
      std::iota(all.begin(), all.end(), Index{0});
      std::mt19937_64 drop_rng(derive_seed(seed, {kDropoutTag, r, e, b}));

      const auto logits = forward(params, stack(images, all), Mode::Train, &drop_rng);
      const auto loss = cross_entropy(logits, std::span<const int>(y));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("training loss is " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(b) + " of fold " + std::to_string(rotation));
      }
      params.zero_grad();
      backward(loss);
      optimizer_step(params, opt, cfg);

      loss_sum += value * static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const int p = argmax(std::span<const float>(logits.data().data() + static_cast<Index>(j) * C,
                                                    static_cast<std::size_t>(C)));
        correct += p == y[j];
      }
    }

    const auto val = predict(params, data.inputs, data.labels, roles.validation, cfg.batch_size);
    const auto decision = early_stop_update(stop, val.mean_loss, epoch, cfg.patience_limit, &params);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_loss = val.mean_loss;
    m.val_accuracy = val.accuracy();
    m.patience = stop.consecutive_bad_epochs;
    m.improved = stop.best_epoch == epoch;
    result.log.push_back(m);
    if (log) {
      auto j = m.to_json();
      j["fold"] = rotation;
      *log << j.dump() << "\n";
    }
    result.epochs_trained = epoch;
    if (decision == StopDecision::Stop) {
      result.early_stopped = true;
      break;
    }
  }

  const auto& best = result.log[static_cast<std::size_t>(stop.best_epoch - 1)];
  result.best.model = initial.config;
  result.best.class_names = data.class_names;
  result.best.epoch = stop.best_epoch;
  result.best.metrics = best.to_json();
  result.best.seed = seed;
  result.best.params = *stop.best_params;
  return result;
}

nlohmann::json KFoldResult::summary_json() const {
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& s : summaries) {
    folds_json.push_back({{"fold", s.rotation},
                          {"epochs_trained", s.epochs_trained},
                          {"best_epoch", s.best_epoch},
                          {"best_val_loss", s.best_val_loss},
                          {"test_accuracy", s.test_accuracy},
                          {"test_samples", s.test_samples},
                          {"early_stopped", s.early_stopped}});
  }
  return {{"k", split.k},
          {"folds", folds_json},
          {"mean_test_accuracy", mean_test_accuracy},
          {"std_test_accuracy", std_test_accuracy}};
}

KFoldResult run_kfold(const PreparedData& data, const ModelConfig& model, const TrainConfig& cfg,
                      const AugmentConfig& augment_cfg, const KFoldOptions& options) {
  cfg.validate();
  augment_cfg.validate();
  const Index C = static_cast<Index>(data.class_names.size());
  KFoldResult out;
  out.split = kfold_split(data.size(), cfg.k_folds, cfg.seed, options.stratified, data.labels);
  const Index k = cfg.k_folds;
  out.folds.resize(static_cast<std::size_t>(k));
  out.summaries.resize(static_cast<std::size_t>(k));

  std::mutex log_mutex;
  auto run_one = [&](Index rotation, std::ostream* fold_log) {
    const auto rr = static_cast<std::uint64_t>(rotation);
    ViTParams<float> init;
    if (options.pretrained) {
      init = adapt_head(*options.pretrained, C, derive_seed(cfg.seed, {kHeadTag, rr}));
    } else {
      ModelConfig mc = model;
      mc.num_classes = C;
      init = init_params<float>(mc, derive_seed(cfg.seed, {kInitTag, rr}));
    }
    const auto roles = out.split.roles(rotation);
    auto fold = train_fold(init, data, roles, rotation, cfg, augment_cfg, fold_log);
    const auto test = predict(fold.best.params, data.inputs, data.labels, roles.test, cfg.batch_size);
    fold.best.metrics["test_accuracy"] = test.accuracy();
    fold.best.metrics["test_loss"] = test.mean_loss;

    FoldSummary s;
    s.rotation = rotation;
    s.epochs_trained = fold.epochs_trained;
    s.best_epoch = fold.best.epoch;
    s.best_val_loss = fold.log[static_cast<std::size_t>(fold.best.epoch - 1)].val_loss;
    s.test_accuracy = test.accuracy();
    s.test_samples = static_cast<Index>(roles.test.size());
    s.early_stopped = fold.early_stopped;
    out.summaries[static_cast<std::size_t>(rotation)] = s;
    out.folds[static_cast<std::size_t>(rotation)] = std::move(fold);
  };

  if (options.parallel) {
    std::vector<std::ostringstream> buffers(static_cast<std::size_t>(k));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
    std::vector<std::thread> threads;
    for (Index r = 0; r < k; ++r) {
      threads.emplace_back([&, r] {
        const auto idx = static_cast<std::size_t>(r);
        try {
          run_one(r, options.log ? &buffers[idx] : nullptr);
        } catch (...) {
          errors[idx] = std::current_exception();
        }
        // Without the deterministic flag, logs appear in completion order.
        if (options.log && !cfg.deterministic) {
          std::lock_guard lock(log_mutex);
          *options.log << buffers[idx].str();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    if (options.log && cfg.deterministic) {
      for (const auto& b : buffers) *options.log << b.str();
    }
  } else {
    for (Index r = 0; r < k; ++r) run_one(r, options.log);
  }

  double sum = 0.0;
  for (const auto& s : out.summaries) sum += s.test_accuracy;
  out.mean_test_accuracy = sum / static_cast<double>(k);
  double sq = 0.0;
  for (const auto& s : out.summaries) sq += (s.test_accuracy - out.mean_test_accuracy) * (s.test_accuracy - out.mean_test_accuracy);
  out.std_test_accuracy = std::sqrt(sq / static_cast<double>(k));
  return out;
}

}  // namespace bornovit
