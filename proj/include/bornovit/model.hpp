#pragma once

#include "bornovit/tensor.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace bornovit {

/// Architecture hyperparameters. Defaults reproduce the 0.65M-parameter model.
struct ModelConfig {
  Index image_size = 224;
  Index patch_size = 16;
  Index in_channels = 3;
  Index embed_dim = 128;
  Index depth = 4;
  Index num_heads = 2;
  Index mlp_hidden_dim = 256;
  Index num_classes = 10;
  double dropout_p = 0.1;

  /// Throws ConfigError on non-positive sizes, indivisible patch grid or heads,
  /// or a dropout probability outside [0, 1).
  void validate() const;

  Index grid_size() const { return image_size / patch_size; }
  Index num_patches() const { return grid_size() * grid_size(); }
  /// Patch tokens plus CLS.
  Index seq_len() const { return num_patches() + 1; }
  Index head_dim() const { return embed_dim / num_heads; }

  bool operator==(const ModelConfig&) const = default;
};

/// Canonical (name, shape) list of every learnable tensor, in checkpoint order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

template <typename S>
struct BlockParams {
  Tensor<S> ln1_gamma, ln1_beta;
  Tensor<S> qkv_weight;       // [3d, d], rows ordered q | k | v, heads contiguous
  Tensor<S> out_proj_weight;  // [d, d]
  Tensor<S> out_proj_bias;    // [d]
  Tensor<S> ln2_gamma, ln2_beta;
  Tensor<S> fc1_weight, fc1_bias;
  Tensor<S> fc2_weight, fc2_bias;
};

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
struct ViTParams {
  ModelConfig config;
  Tensor<S> patch_proj_weight;  // [d, C, p, p]
  Tensor<S> patch_proj_bias;    // [d]
  Tensor<S> cls_token;          // [1, 1, d]
  Tensor<S> pos_embedding;      // [1, N+1, d]
  std::vector<BlockParams<S>> blocks;
  Tensor<S> final_ln_gamma, final_ln_beta;
  Tensor<S> head_weight;  // [num_classes, d]
  Tensor<S> head_bias;    // [num_classes]

  /// Handles to every tensor in parameter_shapes() order. Handles alias the
  /// parameters, so writes through them update this model.
  std::vector<NamedTensor<S>> named() const;
  Index count() const;
  ViTParams clone() const;
  void zero_grad() const;
  void set_requires_grad(bool on) const;

  template <typename T>
  ViTParams<T> cast() const {
    std::vector<NamedTensor<T>> converted;
    for (const auto& [name, tensor] : named()) converted.push_back({name, tensor.template cast<T>()});
    return ViTParams<T>::from_named(config, converted);
  }

  /// Assembles a model from a name->tensor table, checking that names and
  /// shapes match parameter_shapes(config) exactly. Throws ShapeError.
  static ViTParams from_named(const ModelConfig& config, const std::vector<NamedTensor<S>>& tensors);
};

enum class Mode { Train, Eval };

/// Intermediate values retained when tracing is requested.
template <typename S>
struct AttentionTrace {
  std::vector<Tensor<S>> attention;         // per block [B, heads, T, T]
  std::vector<Tensor<S>> attention_inputs;  // per block LN1 output [B, T, d]
  std::vector<Tensor<S>> block_outputs;     // per block [B, T, d]
};

/// Deterministic for a fixed seed: truncated normal(0, 0.02) for the CLS and
/// positional tokens, Glorot-uniform weights, zero biases and betas, unit gammas.
template <typename S>
ViTParams<S> init_params(const ModelConfig& config, std::uint64_t seed);

/// Strided-convolution patch embedding: [B,C,H,W] -> [B, N, d].
template <typename S>
Tensor<S> patch_embed(const ViTParams<S>& params, const Tensor<S>& images);

/// Same map computed as flatten-then-linear; used to cross-check patch_embed.
template <typename S>
Tensor<S> patch_embed_linear(const ViTParams<S>& params, const Tensor<S>& images);

/// Logits [B, num_classes]. Train mode applies dropout and needs `rng`.
template <typename S>
Tensor<S> forward(const ViTParams<S>& params, const Tensor<S>& images, Mode mode,
                  std::mt19937_64* rng = nullptr, AttentionTrace<S>* trace = nullptr);

/// Copies the backbone and re-initializes the classifier for `new_num_classes`.
template <typename S>
ViTParams<S> adapt_head(const ViTParams<S>& params, Index new_num_classes, std::uint64_t seed);

}  // namespace bornovit
