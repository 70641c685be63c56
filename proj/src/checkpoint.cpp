#include "bornovit/errors.hpp"
#include "bornovit/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace bornovit {

namespace {

constexpr char kMagic[4] = {'B', 'V', 'I', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) { raw(s.data(), s.size()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint64_t offset() const { return pos_; }
  void need(std::uint64_t n, const char* what) const {
    if (n > b_.size() - pos_) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), static_cast<std::size_t>(n));
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::uint64_t pos_ = 0;
};

nlohmann::json config_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},         {"patch_size", c.patch_size}, {"in_channels", c.in_channels},
          {"embed_dim", c.embed_dim},           {"depth", c.depth},           {"num_heads", c.num_heads},
          {"mlp_hidden_dim", c.mlp_hidden_dim}, {"num_classes", c.num_classes}, {"dropout_p", c.dropout_p}};
}

ModelConfig config_from(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<Index>();
  c.patch_size = j.at("patch_size").get<Index>();
  c.in_channels = j.at("in_channels").get<Index>();
  c.embed_dim = j.at("embed_dim").get<Index>();
  c.depth = j.at("depth").get<Index>();
  c.num_heads = j.at("num_heads").get<Index>();
  c.mlp_hidden_dim = j.at("mlp_hidden_dim").get<Index>();
  c.num_classes = j.at("num_classes").get<Index>();
  c.dropout_p = j.at("dropout_p").get<double>();
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const nlohmann::json meta = {{"model", config_json(ckpt.model)},
                               {"class_names", ckpt.class_names},
                               {"normalization", ckpt.normalization},
                               {"epoch", ckpt.epoch},
                               {"metrics", ckpt.metrics},
                               {"seed", ckpt.seed}};
  const std::string meta_text = meta.dump();
  const auto tensors = ckpt.params.named();

  Writer w;
  w.raw(kMagic, 4);
  w.le<std::uint32_t>(kVersion);
  w.le<std::uint64_t>(meta_text.size());
  w.str(meta_text);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.le<std::uint64_t>(static_cast<std::uint64_t>(d));
    for (Index i = 0; i < t.numel(); ++i) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(t.data()[i]));
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)", 0);
  r.str(4, "magic");
  const auto version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto meta_len = r.le<std::uint64_t>("metadata length");
  const auto meta_at = r.offset();
  const std::string meta_text = r.str(meta_len, "metadata");

  Checkpoint ckpt;
  try {
    const auto meta = nlohmann::json::parse(meta_text);
    ckpt.model = config_from(meta.at("model"));
    ckpt.class_names = meta.at("class_names").get<std::vector<std::string>>();
    ckpt.normalization = meta.at("normalization").get<std::string>();
    ckpt.epoch = meta.at("epoch").get<Index>();
    ckpt.metrics = meta.at("metrics");
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.model.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metadata: ") + e.what(), meta_at);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config in metadata: ") + e.what(), meta_at);
  }

  const auto count_at = r.offset();
  const auto count = r.le<std::uint32_t>("tensor count");
  const auto expected = parameter_shapes(ckpt.model);
  if (count != expected.size()) {
    throw FormatError("expected " + std::to_string(expected.size()) + " tensors, found " + std::to_string(count),
                      count_at);
  }
  std::vector<NamedTensor<float>> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto entry_at = r.offset();
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    const auto rank = r.le<std::uint32_t>("tensor rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " for " + name, entry_at);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.le<std::uint64_t>("tensor dims");
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw FormatError("bad dimension in " + name, entry_at);
      numel *= d;
      shape.push_back(static_cast<Index>(d));
    }
    const auto& [want_name, want_shape] = expected[k];
    if (name != want_name || shape != want_shape) {
      throw FormatError("tensor " + std::to_string(k) + " is " + name + " " + shape_str(shape) + ", expected " +
                            want_name + " " + shape_str(want_shape),
                        entry_at);
    }
    r.need(numel * 4, ("values of " + name).c_str());
    Tensor<float>::Storage values(static_cast<Index>(numel));
    for (std::uint64_t i = 0; i < numel; ++i) values[static_cast<Index>(i)] = std::bit_cast<float>(r.le<std::uint32_t>("values"));
    tensors.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(values), true)});
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last tensor", r.offset());
  ckpt.params = ViTParams<float>::from_named(ckpt.model, tensors);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace bornovit
