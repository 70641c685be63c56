#pragma once

#include "bornovit/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace bornovit {

/// Matrix product. Rank-2 operands give [m,k]x[k,n] -> [m,n]; higher ranks
/// multiply the last two axes batch-wise and require identical leading axes.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

/// x[..., in] * weight[out, in]^T + bias[out]. `bias` may be undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias = {});

/// Elementwise sum. `b` may also be broadcast over leading axes of `a`:
/// after dropping leading size-1 axes its shape must equal a trailing slice of a's.
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
/// Elementwise product of equal shapes.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor);

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes);
template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x);
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);

template <typename S>
Tensor<S> sum(const Tensor<S>& x);
template <typename S>
Tensor<S> mean(const Tensor<S>& x);
/// Mean over the last axis; the result drops that axis (rank-1 input gives [1]).
template <typename S>
Tensor<S> mean_last(const Tensor<S>& x);
/// Population variance over the last axis.
template <typename S>
Tensor<S> var_last(const Tensor<S>& x);

/// Softmax over the last axis with max subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x);

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-6));

/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename S>
Tensor<S> gelu(const Tensor<S>& x);

/// Mean negative log-likelihood of `labels` under softmax(logits), logits [B, C].
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels);

/// Inverted dropout. Returns `x` itself when !train or p == 0.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, S p, bool train, std::mt19937_64* rng);

/// Row lookup: table[V, ...] -> [indices.size(), ...]. Gradients scatter-add back.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const Index> indices);

/// Valid (unpadded) 2-D convolution. x[B,C,H,W], weight[D,C,k,k], bias[D]
/// -> [B, D, (H-k)/stride+1, (W-k)/stride+1].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Index stride);

/// Non-overlapping patch extraction: x[B,C,H,W] -> [B, (H/p)(W/p), C*p*p].
/// Patches are row-major over the grid; values inside a patch are ordered (c, y, x).
template <typename S>
Tensor<S> patchify(const Tensor<S>& x, Index patch);

}  // namespace bornovit
