// bornovit: train, evaluate, profile and explain a small vision transformer.

#include "bornovit/errors.hpp"
#include "bornovit/evaluator.hpp"
#include "bornovit/profiler.hpp"
#include "bornovit/run_config.hpp"
#include "bornovit/trainer.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace bornovit;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kMismatch = 4 };

// Checkpoint and dataset (or config) disagree.
class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void log_event(const std::string& event, nlohmann::json fields = nlohmann::json::object()) {
  fields["event"] = event;
  std::cerr << fields.dump() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

void report_dataset_issues(const Dataset& ds) {
  for (const auto& w : ds.warnings) log_event("dataset_warning", {{"message", w}});
  for (const auto& e : ds.errors) log_event("dataset_skipped", {{"message", e}});
}

struct TrainArgs {
  std::string config, data_dir, out, pretrained;
  std::optional<std::uint64_t> seed;
  bool parallel = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.data_dir.empty()) cfg.data.root_dir = a.data_dir;
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.parallel) cfg.mode.parallel_folds = true;
  cfg.validate();
  cfg.check_paths();

  const Dataset ds = load_dataset(cfg.data.root_dir, cfg.data.manifest);
  report_dataset_issues(ds);
  if (cfg.num_classes_from_data) {
    cfg.model.num_classes = ds.num_classes();
  } else if (cfg.model.num_classes != ds.num_classes()) {
    throw MismatchError("config says model.num_classes = " + std::to_string(cfg.model.num_classes) +
                        " but the dataset has " + std::to_string(ds.num_classes()) + " classes");
  }
  const PreparedData data = prepare(ds, cfg.model.image_size);
  log_event("dataset_loaded", {{"samples", data.size()}, {"classes", ds.num_classes()}});

  KFoldOptions opts;
  opts.stratified = cfg.mode.stratified_folds;
  opts.parallel = cfg.mode.parallel_folds;
  opts.log = &std::cerr;
  if (!a.pretrained.empty()) {
    const Checkpoint pre = load_checkpoint(a.pretrained);
    ModelConfig want = cfg.model;
    want.num_classes = pre.model.num_classes;
    if (!(want == pre.model)) {
      throw MismatchError("pretrained checkpoint architecture does not match model config");
    }
    opts.pretrained = pre.params;
  }

  make_dir(cfg.output_dir);
  const KFoldResult result = run_kfold(data, cfg.model, cfg.train, cfg.augment, opts);

  for (std::size_t r = 0; r < result.folds.size(); ++r) {
    const auto& fold = result.folds[r];
    save_checkpoint(cfg.output_dir / ("fold" + std::to_string(r) + ".bvit"), fold.best);
    std::ostringstream lines;
    for (const auto& m : fold.log) lines << m.to_json().dump() << "\n";
    write_text(cfg.output_dir / ("metrics_fold" + std::to_string(r) + ".jsonl"), lines.str());
  }
  auto summary = result.summary_json();
  auto used = cfg.to_json();
  used.erase("output_dir");
  summary["config"] = used;
  summary["class_names"] = data.class_names;
  write_text(cfg.output_dir / "summary.json", summary.dump(2) + "\n");

  std::printf("fold  epochs  best_epoch  test_accuracy\n");
  for (const auto& s : result.summaries) {
    std::printf("%4lld  %6lld  %10lld  %13.4f\n", static_cast<long long>(s.rotation),
                static_cast<long long>(s.epochs_trained), static_cast<long long>(s.best_epoch), s.test_accuracy);
  }
  std::printf("mean test accuracy %.4f (std %.4f) over %lld folds\n", result.mean_test_accuracy,
              result.std_test_accuracy, static_cast<long long>(result.split.k));
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& manifest,
             const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  std::optional<fs::path> man;
  if (!manifest.empty()) man = manifest;
  const Dataset ds = load_dataset(data_dir, man);
  report_dataset_issues(ds);
  if (ds.num_classes() != ckpt.model.num_classes) {
    throw MismatchError("checkpoint has " + std::to_string(ckpt.model.num_classes) + " classes, dataset has " +
                        std::to_string(ds.num_classes()) +
                        "; retrain with a re-initialized head (train --pretrained) for this label set");
  }
  if (!ckpt.class_names.empty() && ckpt.class_names != ds.class_names) {
    log_event("class_names_differ", {{"checkpoint", ckpt.class_names}, {"dataset", ds.class_names}});
  }
  const PreparedData data = prepare(ds, ckpt.model.image_size);
  const auto report = evaluate(ckpt.params, data.inputs, data.labels, ds.class_names);
  std::cout << report.to_text();
  make_dir(out);
  write_text(fs::path(out) / "report.json", report.to_json().dump(2) + "\n");
  write_text(fs::path(out) / "confusion.csv", report.confusion_csv());
  return kOk;
}

int cmd_profile(const std::string& config, std::optional<Index> num_classes, bool json) {
  ModelConfig model;
  if (!config.empty()) model = load_run_config(config).model;
  if (num_classes) model.num_classes = *num_classes;
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("--num-classes: ") + e.what());
  }
  const auto report = profile(model);
  if (json) {
    std::cout << to_json(report).dump(2) << "\n";
  } else {
    std::cout << render_text(report);
  }
  return kOk;
}

int cmd_gradcam(const std::string& checkpoint, const std::string& image, const std::string& out,
                std::optional<int> target) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Image img = read_image(image);
  const auto input = resize_to_input(img, ckpt.model.image_size);
  const auto cam = gradcam(ckpt.params, input, target);
  make_dir(out);
  write_png(fs::path(out) / "heatmap.png", cam.heatmap);
  write_png(fs::path(out) / "overlay.png", cam.overlay);
  auto name = [&](int c) {
    return c < static_cast<int>(ckpt.class_names.size()) ? ckpt.class_names[static_cast<std::size_t>(c)]
                                                        : std::to_string(c);
  };
  std::printf("predicted %s (class %d)\n", name(cam.predicted_class).c_str(), cam.predicted_class);
  std::printf("target %s (class %d) confidence %.4f\n", name(cam.target_class).c_str(), cam.target_class,
              cam.confidence);
  return kOk;
}

int cmd_crop_page(const std::string& image, Index rows, Index cols, const std::string& out_dir) {
  const Image page = read_image(image);
  const auto cells = crop_page_grid(page, rows, cols);
  make_dir(out_dir);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const auto& cell = cells[static_cast<std::size_t>(r * cols + c)];
      write_png(fs::path(out_dir) / ("cell_" + std::to_string(r) + "_" + std::to_string(c) + ".png"), cell);
    }
  std::printf("wrote %lld cells to %s\n", static_cast<long long>(cells.size()), out_dir.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer for handwritten character recognition"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "k-fold training; writes fold checkpoints, metric logs and summary.json");
  train->add_option("--config", ta.config, "JSON run configuration");
  train->add_option("--data-dir", ta.data_dir, "image-folder dataset (overrides data.root_dir)");
  train->add_option("--out", ta.out, "output directory (overrides output_dir)");
  train->add_option("--seed", ta.seed, "RNG seed (overrides train.seed)");
  train->add_flag("--parallel-folds", ta.parallel, "train folds on separate threads");
  train->add_option("--pretrained", ta.pretrained, "start every fold from this checkpoint's backbone");

  std::string ev_ckpt, ev_data, ev_manifest, ev_out = ".";
  auto* eval = app.add_subcommand("eval", "classification report for a checkpoint on a dataset");
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--data-dir", ev_data)->required();
  eval->add_option("--manifest", ev_manifest, "restrict to the files listed here");
  eval->add_option("--out", ev_out, "directory for report.json and confusion.csv")->capture_default_str();

  std::string pr_config;
  std::optional<Index> pr_classes;
  bool pr_json = false;
  auto* prof = app.add_subcommand("profile", "per-layer parameters, MACs and model size");
  prof->add_option("--config", pr_config, "JSON run configuration");
  prof->add_option("--num-classes", pr_classes, "override model.num_classes");
  prof->add_flag("--json", pr_json, "machine-readable output");

  std::string gc_ckpt, gc_image, gc_out;
  std::optional<int> gc_class;
  auto* cam = app.add_subcommand("gradcam", "class activation heatmap for one image");
  cam->add_option("--checkpoint", gc_ckpt)->required();
  cam->add_option("--image", gc_image)->required();
  cam->add_option("--out", gc_out, "directory for heatmap.png and overlay.png")->required();
  cam->add_option("--class", gc_class, "target class (default: predicted)");

  std::string cp_image, cp_out;
  Index cp_rows = 10, cp_cols = 6;
  auto* crop = app.add_subcommand("crop-page", "cut a scanned form into a grid of character cells");
  crop->add_option("--image", cp_image)->required();
  crop->add_option("--rows", cp_rows)->capture_default_str();
  crop->add_option("--cols", cp_cols)->capture_default_str();
  crop->add_option("--out-dir", cp_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_eval(ev_ckpt, ev_data, ev_manifest, ev_out);
    if (*prof) return cmd_profile(pr_config, pr_classes, pr_json);
    if (*cam) return cmd_gradcam(gc_ckpt, gc_image, gc_out, gc_class);
    if (*crop) return cmd_crop_page(cp_image, cp_rows, cp_cols, cp_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const FormatError& e) {
    std::cerr << "bad checkpoint: " << e.what() << "\n";
    return kConfig;
  } catch (const IndexError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const MismatchError& e) {
    std::cerr << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
