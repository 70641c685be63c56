#include "doctest.h"

#include "bornovit/errors.hpp"
#include "bornovit/run_config.hpp"
#include "support/glyphs.hpp"

#include <fstream>

using namespace bornovit;
using nlohmann::json;

namespace {

std::string error_of(const json& j) {
  try {
    parse_run_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("empty config takes every default") {
  const auto c = parse_run_config(json::object());
  CHECK(c.model == ModelConfig{});
  CHECK(c.train.learning_rate == 1e-4);
  CHECK(c.train.batch_size == 128);
  CHECK(c.train.max_epochs == 100);
  CHECK(c.train.patience_limit == 10);
  CHECK(c.train.k_folds == 5);
  CHECK(c.train.optimizer.name == "adam");
  CHECK(c.augment.enabled);
  CHECK(c.mode.deterministic);
  CHECK_FALSE(c.mode.stratified_folds);
  CHECK(c.num_classes_from_data);
  CHECK_FALSE(c.data.manifest.has_value());
}

TEST_CASE("fields override defaults") {
  const auto c = parse_run_config(json::parse(R"({
    "model": {"embed_dim": 32, "depth": 2, "num_classes": 84},
    "train": {"learning_rate": 0.001, "seed": 7, "optimizer": {"name": "sgd", "momentum": 0.9}},
    "augment": {"enabled": false, "hue": 0.05},
    "data": {"root_dir": "/data/x", "manifest": "/data/x/list.tsv"},
    "output_dir": "out",
    "mode": {"deterministic": false, "stratified_folds": true}
  })"));
  CHECK(c.model.embed_dim == 32);
  CHECK(c.model.depth == 2);
  CHECK(c.model.num_heads == 2);
  CHECK(c.model.num_classes == 84);
  CHECK_FALSE(c.num_classes_from_data);
  CHECK(c.train.learning_rate == 0.001);
  CHECK(c.train.seed == 7);
  CHECK(c.train.optimizer.name == "sgd");
  CHECK(c.train.optimizer.momentum == 0.9);
  CHECK_FALSE(c.train.deterministic);
  CHECK_FALSE(c.augment.enabled);
  CHECK(c.augment.hue == 0.05);
  CHECK(c.data.root_dir == "/data/x");
  CHECK(*c.data.manifest == "/data/x/list.tsv");
  CHECK(c.output_dir == "out");
  CHECK(c.mode.stratified_folds);
}

TEST_CASE("unknown keys and bad types name the field path") {
  CHECK(error_of({{"model", {{"embed_dimm", 64}}}}) == "unknown key 'model.embed_dimm'");
  CHECK(error_of({{"trian", json::object()}}) == "unknown key 'trian'");
  CHECK(error_of({{"train", {{"optimizer", {{"lr", 1}}}}}}) == "unknown key 'train.optimizer.lr'");
  CHECK(error_of({{"train", {{"batch_size", 12.5}}}}) == "train.batch_size: expected an integer");
  CHECK(error_of({{"train", {{"seed", -1}}}}) == "train.seed: expected a non-negative integer");
  CHECK(error_of({{"augment", {{"enabled", "yes"}}}}) == "augment.enabled: expected true or false");
  CHECK(error_of({{"model", 3}}) == "model: expected an object");
  CHECK(error_of(json::array()) == "config: expected an object");
}

TEST_CASE("value ranges are checked after parsing") {
  CHECK(error_of({{"train", {{"learning_rate", -1.0}}}}).rfind("train.learning_rate", 0) == 0);
  CHECK(error_of({{"train", {{"k_folds", 2}}}}).rfind("train.k_folds", 0) == 0);
  CHECK(error_of({{"train", {{"optimizer", {{"name", "rmsprop"}}}}}}).rfind("train.optimizer.name", 0) == 0);
  CHECK(error_of({{"augment", {{"hue", 0.7}}}}).rfind("augment.hue", 0) == 0);
  CHECK(error_of({{"augment", {{"fill", 2.0}}}}).rfind("augment.fill", 0) == 0);
  CHECK(error_of({{"model", {{"patch_size", 15}}}}).rfind("model.image_size", 0) == 0);
  CHECK(error_of({{"model", {{"embed_dim", 0}}}}).rfind("model.embed_dim", 0) == 0);
}

TEST_CASE("to_json round-trips") {
  auto c = parse_run_config(json::parse(R"({"model": {"depth": 3, "num_classes": 5}, "train": {"seed": 99},
                                            "data": {"root_dir": "d"}})"));
  const auto again = parse_run_config(c.to_json());
  CHECK(again.model == c.model);
  CHECK(again.train.seed == 99);
  CHECK(again.data.root_dir == "d");
  CHECK(again.to_json() == c.to_json());
}

TEST_CASE("paths and files") {
  const auto dir = bornovit::testing::scratch_dir("config");
  RunConfig c;
  CHECK_THROWS_AS(c.check_paths(), DataError);
  c.data.root_dir = dir / "missing";
  CHECK_THROWS_WITH_AS(c.check_paths(), doctest::Contains("missing"), DataError);
  c.data.root_dir = dir;
  CHECK_NOTHROW(c.check_paths());
  c.data.manifest = dir / "nope.tsv";
  CHECK_THROWS_AS(c.check_paths(), DataError);

  CHECK_THROWS_AS(load_run_config(dir / "absent.json"), DataError);
  {
    std::ofstream(dir / "broken.json") << "{\"model\": ";
  }
  CHECK_THROWS_AS(load_run_config(dir / "broken.json"), ConfigError);
  {
    std::ofstream(dir / "ok.json") << R"({"train": {"max_epochs": 3}})";
  }
  CHECK(load_run_config(dir / "ok.json").train.max_epochs == 3);
  std::filesystem::remove_all(dir);
}
