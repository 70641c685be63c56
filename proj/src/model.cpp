#include "bornovit/model.hpp"

#include "bornovit/errors.hpp"
#include "bornovit/ops.hpp"
#include "bornovit/random.hpp"

#include <cmath>
#include <map>

namespace bornovit {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model config: " + msg);
  };
  require(image_size > 0, "image_size must be positive");
  require(patch_size > 0, "patch_size must be positive");
  require(in_channels > 0, "in_channels must be positive");
  require(embed_dim > 0, "embed_dim must be positive");
  require(depth >= 0, "depth must be non-negative");
  require(num_heads > 0, "num_heads must be positive");
  require(mlp_hidden_dim > 0, "mlp_hidden_dim must be positive");
  require(num_classes > 0, "num_classes must be positive");
  require(image_size % patch_size == 0, "image_size " + std::to_string(image_size) +
                                            " is not divisible by patch_size " + std::to_string(patch_size));
  require(embed_dim % num_heads == 0, "embed_dim " + std::to_string(embed_dim) +
                                          " is not divisible by num_heads " + std::to_string(num_heads));
  require(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p must lie in [0, 1)");
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  const Index d = c.embed_dim, h = c.mlp_hidden_dim;
  std::vector<std::pair<std::string, Shape>> out{
      {"patch_embed.weight", {d, c.in_channels, c.patch_size, c.patch_size}},
      {"patch_embed.bias", {d}},
      {"cls_token", {1, 1, d}},
      {"pos_embed", {1, c.seq_len(), d}},
  };
  for (Index b = 0; b < c.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    out.push_back({p + "ln1.gamma", {d}});
    out.push_back({p + "ln1.beta", {d}});
    out.push_back({p + "attn.qkv.weight", {3 * d, d}});
    out.push_back({p + "attn.out.weight", {d, d}});
    out.push_back({p + "attn.out.bias", {d}});
    out.push_back({p + "ln2.gamma", {d}});
    out.push_back({p + "ln2.beta", {d}});
    out.push_back({p + "mlp.fc1.weight", {h, d}});
    out.push_back({p + "mlp.fc1.bias", {h}});
    out.push_back({p + "mlp.fc2.weight", {d, h}});
    out.push_back({p + "mlp.fc2.bias", {d}});
  }
  out.push_back({"norm.gamma", {d}});
  out.push_back({"norm.beta", {d}});
  out.push_back({"head.weight", {c.num_classes, d}});
  out.push_back({"head.bias", {c.num_classes}});
  return out;
}

template <typename S>
std::vector<NamedTensor<S>> ViTParams<S>::named() const {
  std::vector<NamedTensor<S>> out{
      {"patch_embed.weight", patch_proj_weight},
      {"patch_embed.bias", patch_proj_bias},
      {"cls_token", cls_token},
      {"pos_embed", pos_embedding},
  };
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    const auto& blk = blocks[b];
    out.push_back({p + "ln1.gamma", blk.ln1_gamma});
    out.push_back({p + "ln1.beta", blk.ln1_beta});
    out.push_back({p + "attn.qkv.weight", blk.qkv_weight});
    out.push_back({p + "attn.out.weight", blk.out_proj_weight});
    out.push_back({p + "attn.out.bias", blk.out_proj_bias});
    out.push_back({p + "ln2.gamma", blk.ln2_gamma});
    out.push_back({p + "ln2.beta", blk.ln2_beta});
    out.push_back({p + "mlp.fc1.weight", blk.fc1_weight});
    out.push_back({p + "mlp.fc1.bias", blk.fc1_bias});
    out.push_back({p + "mlp.fc2.weight", blk.fc2_weight});
    out.push_back({p + "mlp.fc2.bias", blk.fc2_bias});
  }
  out.push_back({"norm.gamma", final_ln_gamma});
  out.push_back({"norm.beta", final_ln_beta});
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

template <typename S>
Index ViTParams<S>::count() const {
  Index n = 0;
  for (const auto& entry : named()) n += entry.tensor.numel();
  return n;
}

template <typename S>
ViTParams<S> ViTParams<S>::clone() const {
  std::vector<NamedTensor<S>> copies;
  for (const auto& [name, tensor] : named()) copies.push_back({name, tensor.clone()});
  return from_named(config, copies);
}

template <typename S>
void ViTParams<S>::zero_grad() const {
  for (auto entry : named()) entry.tensor.zero_grad();
}

template <typename S>
void ViTParams<S>::set_requires_grad(bool on) const {
  for (auto entry : named()) entry.tensor.set_requires_grad(on);
}

template <typename S>
ViTParams<S> ViTParams<S>::from_named(const ModelConfig& config, const std::vector<NamedTensor<S>>& tensors) {
  config.validate();
  const auto expected = parameter_shapes(config);
  std::map<std::string, Tensor<S>> table;
  for (const auto& [name, tensor] : tensors) {
    if (!table.emplace(name, tensor).second) throw ShapeError("duplicate parameter '" + name + "'");
  }
  if (table.size() != expected.size()) {
    throw ShapeError("expected " + std::to_string(expected.size()) + " parameter tensors, got " +
                     std::to_string(table.size()));
  }
  auto take = [&](const std::string& name) -> Tensor<S> {
    auto it = table.find(name);
    if (it == table.end()) throw ShapeError("missing parameter '" + name + "'");
    return it->second;
  };
  for (const auto& [name, shape] : expected) {
    const auto t = take(name);
    if (t.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(shape));
    }
  }

  ViTParams p;
  p.config = config;
  p.patch_proj_weight = take("patch_embed.weight");
  p.patch_proj_bias = take("patch_embed.bias");
  p.cls_token = take("cls_token");
  p.pos_embedding = take("pos_embed");
  for (Index b = 0; b < config.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    BlockParams<S> blk;
    blk.ln1_gamma = take(pre + "ln1.gamma");
    blk.ln1_beta = take(pre + "ln1.beta");
    blk.qkv_weight = take(pre + "attn.qkv.weight");
    blk.out_proj_weight = take(pre + "attn.out.weight");
    blk.out_proj_bias = take(pre + "attn.out.bias");
    blk.ln2_gamma = take(pre + "ln2.gamma");
    blk.ln2_beta = take(pre + "ln2.beta");
    blk.fc1_weight = take(pre + "mlp.fc1.weight");
    blk.fc1_bias = take(pre + "mlp.fc1.bias");
    blk.fc2_weight = take(pre + "mlp.fc2.weight");
    blk.fc2_bias = take(pre + "mlp.fc2.bias");
    p.blocks.push_back(std::move(blk));
  }
  p.final_ln_gamma = take("norm.gamma");
  p.final_ln_beta = take("norm.beta");
  p.head_weight = take("head.weight");
  p.head_bias = take("head.bias");
  return p;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename S>
Tensor<S> truncated_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  typename Tensor<S>::Storage v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    double z;
    do {
      z = standard_normal(rng);
    } while (std::abs(z) > 2.0);
    v[i] = static_cast<S>(z * stddev);
  }
  return Tensor<S>(shape, std::move(v), true);
}

// Weights are [out, in] or [out, in, k, k].
template <typename S>
Tensor<S> glorot_uniform(const Shape& shape, std::mt19937_64& rng) {
  const Index receptive = shape.size() == 4 ? shape[2] * shape[3] : 1;
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  typename Tensor<S>::Storage v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(uniform(rng, -limit, limit));
  return Tensor<S>(shape, std::move(v), true);
}

template <typename S>
Tensor<S> init_tensor(const std::string& name, const Shape& shape, std::mt19937_64& rng) {
  if (name == "cls_token" || name == "pos_embed") return truncated_normal<S>(shape, 0.02, rng);
  if (ends_with(name, ".weight")) return glorot_uniform<S>(shape, rng);
  if (ends_with(name, ".gamma")) return Tensor<S>::full(shape, S(1), true);
  return Tensor<S>::zeros(shape, true);
}

}  // namespace

template <typename S>
ViTParams<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor<S>> tensors;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    tensors.push_back({name, init_tensor<S>(name, shape, rng)});
  }
  return ViTParams<S>::from_named(config, tensors);
}

template <typename S>
ViTParams<S> adapt_head(const ViTParams<S>& params, Index new_num_classes, std::uint64_t seed) {
  if (new_num_classes < 1) {
    throw ConfigError("adapt_head: class count must be at least 1, got " + std::to_string(new_num_classes));
  }
  ModelConfig config = params.config;
  config.num_classes = new_num_classes;
  std::mt19937_64 rng(seed);
  std::vector<NamedTensor<S>> tensors;
  for (const auto& [name, tensor] : params.named()) {
    if (name == "head.weight") {
      tensors.push_back({name, init_tensor<S>(name, {new_num_classes, config.embed_dim}, rng)});
    } else if (name == "head.bias") {
      tensors.push_back({name, init_tensor<S>(name, {new_num_classes}, rng)});
    } else {
      tensors.push_back({name, tensor.clone()});
    }
  }
  return ViTParams<S>::from_named(config, tensors);
}

namespace {

template <typename S>
void check_images(const ModelConfig& c, const Tensor<S>& images) {
  if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw ShapeError("expected images of shape (B, " + std::to_string(c.in_channels) + ", " +
                     std::to_string(c.image_size) + ", " + std::to_string(c.image_size) + "), got " +
                     shape_str(images.shape()));
  }
}

template <typename S>
Tensor<S> self_attention(const BlockParams<S>& blk, const ModelConfig& c, const Tensor<S>& x,
                         Tensor<S>* weights_out) {
  const Index B = x.dim(0), T = x.dim(1), d = c.embed_dim, H = c.num_heads, hd = c.head_dim();
  auto qkv = linear(x, blk.qkv_weight);
  qkv = permute(reshape(qkv, {B, T, 3, H, hd}), {2, 0, 3, 1, 4});  // [3, B, H, T, hd]
  auto q = reshape(slice(qkv, 0, 0, 1), {B, H, T, hd});
  auto k = reshape(slice(qkv, 0, 1, 1), {B, H, T, hd});
  auto v = reshape(slice(qkv, 0, 2, 1), {B, H, T, hd});
  auto scores = scale(matmul(q, transpose_last2(k)), static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd))));
  auto attn = softmax(scores);
  if (weights_out) *weights_out = attn;
  auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, T, d});
  return linear(ctx, blk.out_proj_weight, blk.out_proj_bias);
}

}  // namespace

template <typename S>
Tensor<S> patch_embed(const ViTParams<S>& params, const Tensor<S>& images) {
  const auto& c = params.config;
  check_images(c, images);
  auto maps = conv2d(images, params.patch_proj_weight, params.patch_proj_bias, c.patch_size);
  // [B, d, g, g] -> [B, N, d]
  return transpose_last2(reshape(maps, {images.dim(0), c.embed_dim, c.num_patches()}));
}

template <typename S>
Tensor<S> patch_embed_linear(const ViTParams<S>& params, const Tensor<S>& images) {
  const auto& c = params.config;
  check_images(c, images);
  const Index K = c.in_channels * c.patch_size * c.patch_size;
  auto w = reshape(params.patch_proj_weight, {c.embed_dim, K});
  return linear(patchify(images, c.patch_size), w, params.patch_proj_bias);
}

template <typename S>
Tensor<S> forward(const ViTParams<S>& params, const Tensor<S>& images, Mode mode, std::mt19937_64* rng,
                  AttentionTrace<S>* trace) {
  const auto& c = params.config;
  const bool train = mode == Mode::Train;
  const S p = static_cast<S>(c.dropout_p);
  const Index B = images.dim(0), d = c.embed_dim;

  auto patches = patch_embed(params, images);
  const std::vector<Index> zeros(static_cast<std::size_t>(B), 0);
  auto cls = reshape(gather_rows(reshape(params.cls_token, {1, d}), zeros), {B, 1, d});
  auto x = add(concat<S>({cls, patches}, 1), params.pos_embedding);
  x = dropout(x, p, train, rng);

  if (trace) {
    trace->attention.clear();
    trace->attention_inputs.clear();
    trace->block_outputs.clear();
  }
  for (const auto& blk : params.blocks) {
    Tensor<S> weights;
    auto h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    if (trace) trace->attention_inputs.push_back(h);
    x = add(x, self_attention(blk, c, h, trace ? &weights : nullptr));
    h = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    h = dropout(gelu(linear(h, blk.fc1_weight, blk.fc1_bias)), p, train, rng);
    h = dropout(linear(h, blk.fc2_weight, blk.fc2_bias), p, train, rng);
    x = add(x, h);
    if (trace) {
      trace->attention.push_back(weights);
      trace->block_outputs.push_back(x);
    }
  }
  x = layer_norm(x, params.final_ln_gamma, params.final_ln_beta);
  auto cls_out = reshape(slice(x, 1, 0, 1), {B, d});
  return linear(cls_out, params.head_weight, params.head_bias);
}

#define BORNOVIT_INSTANTIATE_MODEL(S)                                                                 \
  template struct ViTParams<S>;                                                                       \
  template ViTParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                            \
  template ViTParams<S> adapt_head(const ViTParams<S>&, Index, std::uint64_t);                        \
  template Tensor<S> patch_embed(const ViTParams<S>&, const Tensor<S>&);                              \
  template Tensor<S> patch_embed_linear(const ViTParams<S>&, const Tensor<S>&);                       \
  template Tensor<S> forward(const ViTParams<S>&, const Tensor<S>&, Mode, std::mt19937_64*,           \
                             AttentionTrace<S>*);

BORNOVIT_INSTANTIATE_MODEL(float)
BORNOVIT_INSTANTIATE_MODEL(double)

}  // namespace bornovit
