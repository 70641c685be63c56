#include "bornovit/run_config.hpp"

#include "bornovit/errors.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace bornovit {

namespace {

using nlohmann::json;

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

// Walks one JSON object, handing out typed fields and remembering which keys
// were consumed so the leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  void index(const std::string& key, Index& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(join(path_, key) + ": expected an integer");
      out = v->get<Index>();
    }
  }
  void uint(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (v->is_number_unsigned()) {
        out = v->get<std::uint64_t>();
      } else {
        throw ConfigError(join(path_, key) + ": expected a non-negative integer");
      }
    }
  }
  template <typename F>
  void real(const std::string& key, F& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(join(path_, key) + ": expected a number");
      out = static_cast<F>(v->get<double>());
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(join(path_, key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void string(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(join(path_, key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void path(const std::string& key, std::filesystem::path& out) {
    std::string s = out.string();
    string(key, s);
    out = s;
  }
  std::optional<Section> child(const std::string& key) {
    if (const json* v = take(key)) return Section(*v, join(path_, key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key '" + join(path_, key) + "'");
    }
  }

 private:
  const json* take(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    return &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section root(j, "");

  if (auto m = root.child("model")) {
    c.num_classes_from_data = !m->has("num_classes");
    m->index("image_size", c.model.image_size);
    m->index("patch_size", c.model.patch_size);
    m->index("in_channels", c.model.in_channels);
    m->index("embed_dim", c.model.embed_dim);
    m->index("depth", c.model.depth);
    m->index("num_heads", c.model.num_heads);
    m->index("mlp_hidden_dim", c.model.mlp_hidden_dim);
    m->index("num_classes", c.model.num_classes);
    m->real("dropout_p", c.model.dropout_p);
    m->finish();
  }
  if (auto t = root.child("train")) {
    t->real("learning_rate", c.train.learning_rate);
    t->index("batch_size", c.train.batch_size);
    t->index("max_epochs", c.train.max_epochs);
    t->index("patience_limit", c.train.patience_limit);
    t->index("k_folds", c.train.k_folds);
    t->uint("seed", c.train.seed);
    if (auto o = t->child("optimizer")) {
      o->string("name", c.train.optimizer.name);
      o->real("beta1", c.train.optimizer.beta1);
      o->real("beta2", c.train.optimizer.beta2);
      o->real("eps", c.train.optimizer.eps);
      o->real("momentum", c.train.optimizer.momentum);
      o->finish();
    }
    t->finish();
  }
  if (auto a = root.child("augment")) {
    a->boolean("enabled", c.augment.enabled);
    a->real("translate_frac", c.augment.translate_frac);
    a->real("shear_deg", c.augment.shear_deg);
    a->real("brightness", c.augment.brightness);
    a->real("contrast", c.augment.contrast);
    a->real("saturation", c.augment.saturation);
    a->real("hue", c.augment.hue);
    a->real("fill", c.augment.fill);
    a->finish();
  }
  if (auto d = root.child("data")) {
    d->path("root_dir", c.data.root_dir);
    if (d->has("manifest")) {
      std::filesystem::path p;
      d->path("manifest", p);
      c.data.manifest = p;
    }
    d->finish();
  }
  root.path("output_dir", c.output_dir);
  if (auto m = root.child("mode")) {
    m->boolean("deterministic", c.mode.deterministic);
    m->boolean("stratified_folds", c.mode.stratified_folds);
    m->boolean("parallel_folds", c.mode.parallel_folds);
    m->finish();
  }
  root.finish();

  c.train.deterministic = c.mode.deterministic;
  c.validate();
  return c;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const ConfigError& e) {
    // "model config: depth must..." -> "model.depth must..."
    std::string msg = e.what();
    const std::string prefix = "model config: ";
    if (msg.rfind(prefix, 0) == 0) msg = "model." + msg.substr(prefix.size());
    throw ConfigError(msg);
  }
  train.validate();
  augment.validate();
  if (std::isnan(augment.fill) || augment.fill < 0.0f || augment.fill > 1.0f) {
    throw ConfigError("augment.fill: must lie in [0, 1]");
  }
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

void RunConfig::check_paths() const {
  if (data.root_dir.empty()) throw DataError("data.root_dir is not set");
  if (!std::filesystem::is_directory(data.root_dir)) {
    throw DataError("data directory does not exist: " + data.root_dir.string());
  }
  if (data.manifest && !std::filesystem::is_regular_file(*data.manifest)) {
    throw DataError("manifest does not exist: " + data.manifest->string());
  }
}

nlohmann::json RunConfig::to_json() const {
  json j = {
      {"model",
       {{"image_size", model.image_size},
        {"patch_size", model.patch_size},
        {"in_channels", model.in_channels},
        {"embed_dim", model.embed_dim},
        {"depth", model.depth},
        {"num_heads", model.num_heads},
        {"mlp_hidden_dim", model.mlp_hidden_dim},
        {"num_classes", model.num_classes},
        {"dropout_p", model.dropout_p}}},
      {"train",
       {{"learning_rate", train.learning_rate},
        {"batch_size", train.batch_size},
        {"max_epochs", train.max_epochs},
        {"patience_limit", train.patience_limit},
        {"k_folds", train.k_folds},
        {"seed", train.seed},
        {"optimizer",
         {{"name", train.optimizer.name},
          {"beta1", train.optimizer.beta1},
          {"beta2", train.optimizer.beta2},
          {"eps", train.optimizer.eps},
          {"momentum", train.optimizer.momentum}}}}},
      {"augment",
       {{"enabled", augment.enabled},
        {"translate_frac", augment.translate_frac},
        {"shear_deg", augment.shear_deg},
        {"brightness", augment.brightness},
        {"contrast", augment.contrast},
        {"saturation", augment.saturation},
        {"hue", augment.hue},
        {"fill", augment.fill}}},
      {"data", {{"root_dir", data.root_dir.string()}}},
      {"output_dir", output_dir.string()},
      {"mode",
       {{"deterministic", mode.deterministic},
        {"stratified_folds", mode.stratified_folds},
        {"parallel_folds", mode.parallel_folds}}}};
  if (data.manifest) j["data"]["manifest"] = data.manifest->string();
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace bornovit
