#include "bornovit/ops.hpp"

#include "bornovit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bornovit {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <typename S>
using Storage = typename Tensor<S>::Storage;
template <typename S>
using Node = typename Tensor<S>::Node;
template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
ConstMatMap<S> as_matrix(const Storage<S>& s, Index rows, Index cols, Index offset = 0) {
  return ConstMatMap<S>(s.data() + offset, rows, cols);
}

template <typename S>
MatMap<S> as_matrix(Storage<S>& s, Index rows, Index cols, Index offset = 0) {
  return MatMap<S>(s.data() + offset, rows, cols);
}

int normalize_axis(int axis, int rank) {
  const int k = axis < 0 ? axis + rank : axis;
  if (k < 0 || k >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return k;
}

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

// Number of times `b` tiles `a`, or -1 when b is not a broadcastable suffix.
Index broadcast_reps(const Shape& a, const Shape& b) {
  if (a == b) return 1;
  const Shape core = strip_leading_ones(b);
  if (core.size() > a.size()) return -1;
  if (!std::equal(core.rbegin(), core.rend(), a.rbegin())) return -1;
  return shape_numel(a) / shape_numel(core);
}

std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] =
        strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return strides;
}

// out[i_0..i_n] = in[...] where out axis j is input axis axes[j].
template <typename S>
void permute_into(const S* in, const Shape& in_shape, const std::vector<int>& axes, S* out) {
  const std::size_t rank = in_shape.size();
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<Index> step(rank);
  for (std::size_t j = 0; j < rank; ++j) {
    out_shape[j] = in_shape[static_cast<std::size_t>(axes[j])];
    step[j] = in_strides[static_cast<std::size_t>(axes[j])];
  }
  const Index n = shape_numel(in_shape);
  const Index inner = out_shape[rank - 1];
  const Index inner_step = step[rank - 1];
  std::vector<Index> counter(rank, 0);
  Index offset = 0;
  for (Index base = 0; base < n; base += inner) {
    for (Index t = 0; t < inner; ++t) out[base + t] = in[offset + t * inner_step];
    // Advance the multi-index over all but the innermost axis.
    for (int j = static_cast<int>(rank) - 2; j >= 0; --j) {
      const auto uj = static_cast<std::size_t>(j);
      offset += step[uj];
      if (++counter[uj] < out_shape[uj]) break;
      offset -= step[uj] * out_shape[uj];
      counter[uj] = 0;
    }
  }
}

// Unfolds x[b] (C,H,W) into cols (L, C*k*k) for a valid convolution.
template <typename S>
void im2col(const S* x, Index C, Index H, Index W, Index k, Index stride, S* cols) {
  const Index Ho = (H - k) / stride + 1;
  const Index Wo = (W - k) / stride + 1;
  const Index row_len = C * k * k;
  for (Index oy = 0; oy < Ho; ++oy) {
    for (Index ox = 0; ox < Wo; ++ox) {
      S* row = cols + (oy * Wo + ox) * row_len;
      for (Index c = 0; c < C; ++c) {
        for (Index ky = 0; ky < k; ++ky) {
          const S* src = x + (c * H + oy * stride + ky) * W + ox * stride;
          std::copy(src, src + k, row + (c * k + ky) * k);
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* cols, Index C, Index H, Index W, Index k, Index stride, S* x) {
  const Index Ho = (H - k) / stride + 1;
  const Index Wo = (W - k) / stride + 1;
  const Index row_len = C * k * k;
  for (Index oy = 0; oy < Ho; ++oy) {
    for (Index ox = 0; ox < Wo; ++ox) {
      const S* row = cols + (oy * Wo + ox) * row_len;
      for (Index c = 0; c < C; ++c) {
        for (Index ky = 0; ky < k; ++ky) {
          S* dst = x + (c * H + oy * stride + ky) * W + ox * stride;
          const S* src = row + (c * k + ky) * k;
          for (Index kx = 0; kx < k; ++kx) dst[kx] += src[kx];
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const int r = a.rank();
  bool ok = r >= 2 && b.rank() == r && a.dim(-1) == b.dim(-2);
  for (int i = 0; ok && i < r - 2; ++i) ok = a.dim(i) == b.dim(i);
  if (!ok) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Index batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Storage<S> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    as_matrix<S>(out, m, n, i * m * n).noalias() =
        as_matrix<S>(a.data(), m, k, i * m * k) * as_matrix<S>(b.data(), k, n, i * k * n);
  }
  auto result = Tensor<S>::from_op(std::move(out_shape), std::move(out), {a, b}, "matmul");
  if (result.requires_grad()) {
    result.set_backward([an = a.node(), bn = b.node(), batch, m, k, n](const Storage<S>& g) {
      if (an->requires_grad) {
        Storage<S> da(batch * m * k);
        for (Index i = 0; i < batch; ++i) {
          as_matrix<S>(da, m, k, i * m * k).noalias() =
              as_matrix<S>(g, m, n, i * m * n) * as_matrix<S>(bn->data, k, n, i * k * n).transpose();
        }
        detail::accumulate<S>(*an, da);
      }
      if (bn->requires_grad) {
        Storage<S> db(batch * k * n);
        for (Index i = 0; i < batch; ++i) {
          as_matrix<S>(db, k, n, i * k * n).noalias() =
              as_matrix<S>(an->data, m, k, i * m * k).transpose() * as_matrix<S>(g, m, n, i * m * n);
        }
        detail::accumulate<S>(*bn, db);
      }
    });
  }
  return result;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const Index in = weight.dim(1), out_dim = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  Storage<S> out(rows * out_dim);
  auto y = as_matrix<S>(out, rows, out_dim);
  y.noalias() = as_matrix<S>(x.data(), rows, in) * as_matrix<S>(weight.data(), out_dim, in).transpose();
  if (bias.defined()) y.rowwise() += bias.data().matrix().transpose();

  std::vector<Tensor<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto result = Tensor<S>::from_op(std::move(out_shape), std::move(out), inputs, "linear");
  if (result.requires_grad()) {
    NodePtr<S> bn = bias.defined() ? bias.node() : nullptr;
    result.set_backward([xn = x.node(), wn = weight.node(), bn, rows, in, out_dim](const Storage<S>& g) {
      const auto G = as_matrix<S>(g, rows, out_dim);
      if (xn->requires_grad) {
        Storage<S> dx(rows * in);
        as_matrix<S>(dx, rows, in).noalias() = G * as_matrix<S>(wn->data, out_dim, in);
        detail::accumulate<S>(*xn, dx);
      }
      if (wn->requires_grad) {
        Storage<S> dw(out_dim * in);
        as_matrix<S>(dw, out_dim, in).noalias() = G.transpose() * as_matrix<S>(xn->data, rows, in);
        detail::accumulate<S>(*wn, dw);
      }
      if (bn && bn->requires_grad) {
        Storage<S> db = G.colwise().sum().transpose().array();
        detail::accumulate<S>(*bn, db);
      }
    });
  }
  return result;
}

namespace {

template <typename S>
Tensor<S> add_or_sub(const Tensor<S>& a, const Tensor<S>& b, S sign, const char* name) {
  const Index reps = broadcast_reps(a.shape(), b.shape());
  if (reps < 0) {
    throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const Index inner = b.numel();
  Storage<S> out = a.data();
  auto om = as_matrix<S>(out, reps, inner);
  if (sign > 0) {
    om.rowwise() += b.data().matrix().transpose();
  } else {
    om.rowwise() -= b.data().matrix().transpose();
  }
  auto result = Tensor<S>::from_op(a.shape(), std::move(out), {a, b}, name);
  if (result.requires_grad()) {
    result.set_backward([an = a.node(), bn = b.node(), reps, inner, sign](const Storage<S>& g) {
      detail::accumulate<S>(*an, g);
      if (bn->requires_grad) {
        Storage<S> db = as_matrix<S>(g, reps, inner).colwise().sum().transpose().array() * sign;
        detail::accumulate<S>(*bn, db);
      }
    });
  }
  return result;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return add_or_sub(a, b, S(1), "add");
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add_or_sub(a, b, S(-1), "sub");
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  auto result = Tensor<S>::from_op(a.shape(), a.data() * b.data(), {a, b}, "mul");
  if (result.requires_grad()) {
    result.set_backward([an = a.node(), bn = b.node()](const Storage<S>& g) {
      if (an->requires_grad) detail::accumulate<S>(*an, (g * bn->data).eval());
      if (bn->requires_grad) detail::accumulate<S>(*bn, (g * an->data).eval());
    });
  }
  return result;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  auto result = Tensor<S>::from_op(x.shape(), x.data() * factor, {x}, "scale");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), factor](const Storage<S>& g) {
      detail::accumulate<S>(*xn, (g * factor).eval());
    });
  }
  return result;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.numel() % known == 0) {
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto result = Tensor<S>::from_op(std::move(shape), x.data(), {x}, "reshape");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node()](const Storage<S>& g) { detail::accumulate<S>(*xn, g); });
  }
  return result;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  std::vector<int> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expected(static_cast<std::size_t>(r));
  std::iota(expected.begin(), expected.end(), 0);
  if (sorted != expected) throw ShapeError("permute: axes are not a permutation of 0.." + std::to_string(r - 1));

  Shape out_shape(static_cast<std::size_t>(r));
  for (int j = 0; j < r; ++j) out_shape[static_cast<std::size_t>(j)] = x.shape()[static_cast<std::size_t>(axes[static_cast<std::size_t>(j)])];
  Storage<S> out(x.numel());
  permute_into(x.data().data(), x.shape(), axes, out.data());
  auto result = Tensor<S>::from_op(out_shape, std::move(out), {x}, "permute");
  if (result.requires_grad()) {
    std::vector<int> inverse(static_cast<std::size_t>(r));
    for (int j = 0; j < r; ++j) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(j)])] = j;
    result.set_backward([xn = x.node(), out_shape, inverse](const Storage<S>& g) {
      Storage<S> dx(g.size());
      permute_into(g.data(), out_shape, inverse, dx.data());
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  const int r = x.rank();
  if (r < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<int> axes(static_cast<std::size_t>(r));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[static_cast<std::size_t>(r) - 1], axes[static_cast<std::size_t>(r) - 2]);
  return permute(x, axes);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts.front().rank();
  const int ax = normalize_axis(axis, r);
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == r;
    for (int i = 0; ok && i < r; ++i) ok = i == ax || p.dim(i) == parts.front().dim(i);
    if (!ok) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts.front().shape()) + " along axis " + std::to_string(ax));
    }
    out_shape[static_cast<std::size_t>(ax)] += p.dim(ax);
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const Index out_row = out_shape[static_cast<std::size_t>(ax)] * inner;

  Storage<S> out(shape_numel(out_shape));
  std::vector<Index> widths;
  Index col = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(ax) * inner;
    as_matrix<S>(out, outer, out_row).middleCols(col, w) = as_matrix<S>(p.data(), outer, w);
    widths.push_back(w);
    col += w;
  }
  auto result = Tensor<S>::from_op(std::move(out_shape), std::move(out), parts, "concat");
  if (result.requires_grad()) {
    std::vector<NodePtr<S>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    result.set_backward([nodes, widths, outer, out_row](const Storage<S>& g) {
      Index c = 0;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i]->requires_grad) {
          Storage<S> d(outer * widths[i]);
          as_matrix<S>(d, outer, widths[i]) = as_matrix<S>(g, outer, out_row).middleCols(c, widths[i]);
          detail::accumulate<S>(*nodes[i], d);
        }
        c += widths[i];
      }
    });
  }
  return result;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  const int r = x.rank();
  const int ax = normalize_axis(axis, r);
  if (start < 0 || length <= 0 || start + length > x.dim(ax)) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < r; ++i) inner *= x.dim(i);
  const Index in_row = x.dim(ax) * inner;
  const Index w = length * inner;
  const Index c0 = start * inner;
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  Storage<S> out(outer * w);
  as_matrix<S>(out, outer, w) = as_matrix<S>(x.data(), outer, in_row).middleCols(c0, w);
  auto result = Tensor<S>::from_op(std::move(out_shape), std::move(out), {x}, "slice");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), outer, in_row, w, c0](const Storage<S>& g) {
      Storage<S> dx = Storage<S>::Zero(outer * in_row);
      as_matrix<S>(dx, outer, in_row).middleCols(c0, w) = as_matrix<S>(g, outer, w);
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Storage<S> out(1);
  out[0] = x.data().sum();
  auto result = Tensor<S>::from_op({1}, std::move(out), {x}, "sum");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node()](const Storage<S>& g) {
      detail::accumulate<S>(*xn, Storage<S>::Constant(xn->data.size(), g[0]));
    });
  }
  return result;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

namespace {

Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

template <typename S>
Tensor<S> mean_last(const Tensor<S>& x) {
  const Index n = x.dim(-1), rows = x.numel() / n;
  Storage<S> out = as_matrix<S>(x.data(), rows, n).rowwise().mean().array();
  auto result = Tensor<S>::from_op(drop_last(x.shape()), std::move(out), {x}, "mean_last");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), rows, n](const Storage<S>& g) {
      Storage<S> dx(rows * n);
      as_matrix<S>(dx, rows, n).colwise() = g.matrix() / static_cast<S>(n);
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> var_last(const Tensor<S>& x) {
  const Index n = x.dim(-1), rows = x.numel() / n;
  const auto X = as_matrix<S>(x.data(), rows, n);
  RowMat<S> centered = X.colwise() - X.rowwise().mean();
  Storage<S> out = (centered.array().square().rowwise().sum() / static_cast<S>(n)).eval();
  auto result = Tensor<S>::from_op(drop_last(x.shape()), std::move(out), {x}, "var_last");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), centered = std::move(centered), rows, n](const Storage<S>& g) {
      Storage<S> dx(rows * n);
      as_matrix<S>(dx, rows, n) = (centered.array().colwise() * g * (S(2) / static_cast<S>(n))).matrix();
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  const Index n = x.dim(-1), rows = x.numel() / n;
  Storage<S> out(x.numel());
  auto Y = as_matrix<S>(out, rows, n);
  const auto X = as_matrix<S>(x.data(), rows, n);
  Y = (X.colwise() - X.rowwise().maxCoeff()).array().exp().matrix();
  Y.array().colwise() /= Y.rowwise().sum().array();
  auto result = Tensor<S>::from_op(x.shape(), std::move(out), {x}, "softmax");
  if (result.requires_grad()) {
    // The output node outlives this closure's use, so read y through a weak ref.
    std::weak_ptr<Node<S>> self = result.node();
    result.set_backward([xn = x.node(), self, rows, n](const Storage<S>& g) {
      const auto Yv = as_matrix<S>(self.lock()->data, rows, n);
      const auto G = as_matrix<S>(g, rows, n);
      Storage<S> dx(rows * n);
      auto D = as_matrix<S>(dx, rows, n);
      const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (G.array() * Yv.array()).rowwise().sum();
      D = (Yv.array() * (G.colwise() - dots).array()).matrix();
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Index d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  const Index rows = x.numel() / d;
  const auto X = as_matrix<S>(x.data(), rows, d);
  const Eigen::Matrix<S, Eigen::Dynamic, 1> mu = X.rowwise().mean();
  RowMat<S> xhat = X.colwise() - mu;
  const Eigen::Array<S, Eigen::Dynamic, 1> rstd =
      ((xhat.array().square().rowwise().sum() / static_cast<S>(d)) + eps).rsqrt();
  xhat.array().colwise() *= rstd;

  Storage<S> out(rows * d);
  auto Y = as_matrix<S>(out, rows, d);
  Y = (xhat.array().rowwise() * gamma.data().transpose()).matrix();
  Y.rowwise() += beta.data().matrix().transpose();

  auto result = Tensor<S>::from_op(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), rstd,
                         rows, d](const Storage<S>& g) {
      const auto G = as_matrix<S>(g, rows, d);
      if (gn->requires_grad) {
        Storage<S> dg = (G.array() * xhat.array()).colwise().sum().transpose();
        detail::accumulate<S>(*gn, dg);
      }
      if (bn->requires_grad) {
        Storage<S> db = G.colwise().sum().transpose().array();
        detail::accumulate<S>(*bn, db);
      }
      if (xn->requires_grad) {
        const RowMat<S> dxhat = (G.array().rowwise() * gn->data.transpose()).matrix();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> m2 =
            (dxhat.array() * xhat.array()).rowwise().sum() / static_cast<S>(d);
        Storage<S> dx(rows * d);
        auto D = as_matrix<S>(dx, rows, d);
        D = dxhat.colwise() - m1;
        D -= (xhat.array().colwise() * m2.array()).matrix();
        D.array().colwise() *= rstd;
        detail::accumulate<S>(*xn, dx);
      }
    });
  }
  return result;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S c = static_cast<S>(std::sqrt(2.0 / 3.14159265358979323846));
  const S k = S(0.044715);
  const auto& v = x.data();
  const Storage<S> t = (c * (v + k * v.cube())).tanh();
  auto result = Tensor<S>::from_op(x.shape(), S(0.5) * v * (S(1) + t), {x}, "gelu");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), t, c, k](const Storage<S>& g) {
      const auto& xv = xn->data;
      const Storage<S> dydx =
          S(0.5) * (S(1) + t) + S(0.5) * xv * (S(1) - t.square()) * c * (S(1) + S(3) * k * xv.square());
      detail::accumulate<S>(*xn, (g * dydx).eval());
    });
  }
  return result;
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const Index B = logits.dim(0), C = logits.dim(1);
  for (int label : labels) {
    if (label < 0 || label >= C) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(C) + ")");
    }
  }
  const auto Z = as_matrix<S>(logits.data(), B, C);
  const Eigen::Matrix<S, Eigen::Dynamic, 1> zmax = Z.rowwise().maxCoeff();
  RowMat<S> probs = (Z.colwise() - zmax).array().exp().matrix();
  const Eigen::Matrix<S, Eigen::Dynamic, 1> denom = probs.rowwise().sum();
  S total = 0;
  for (Index i = 0; i < B; ++i) {
    total += zmax[i] + std::log(denom[i]) - Z(i, labels[static_cast<std::size_t>(i)]);
  }
  probs.array().colwise() /= denom.array();
  Storage<S> out(1);
  out[0] = total / static_cast<S>(B);
  auto result = Tensor<S>::from_op({1}, std::move(out), {logits}, "cross_entropy");
  if (result.requires_grad()) {
    std::vector<int> lab(labels.begin(), labels.end());
    result.set_backward([zn = logits.node(), probs = std::move(probs), lab, B, C](const Storage<S>& g) {
      Storage<S> dz(B * C);
      auto D = as_matrix<S>(dz, B, C);
      D = probs;
      for (Index i = 0; i < B; ++i) D(i, lab[static_cast<std::size_t>(i)]) -= S(1);
      D *= g[0] / static_cast<S>(B);
      detail::accumulate<S>(*zn, dz);
    });
  }
  return result;
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, S p, bool train, std::mt19937_64* rng) {
  if (!(p >= S(0) && p < S(1))) throw ContractError("dropout probability must lie in [0, 1)");
  if (!train || p == S(0)) return x;
  if (rng == nullptr) throw ContractError("dropout in train mode needs a random generator");
  const S keep_scale = S(1) / (S(1) - p);
  Storage<S> mask(x.numel());
  for (Index i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>((*rng)() >> 11) * 0x1.0p-53;
    mask[i] = u < static_cast<double>(p) ? S(0) : keep_scale;
  }
  auto result = Tensor<S>::from_op(x.shape(), x.data() * mask, {x}, "dropout");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), mask = std::move(mask)](const Storage<S>& g) {
      detail::accumulate<S>(*xn, (g * mask).eval());
    });
  }
  return result;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const Index> indices) {
  const Index V = table.dim(0);
  const Index row = table.numel() / V;
  const Index n = static_cast<Index>(indices.size());
  if (n == 0) throw ShapeError("gather_rows: empty index list");
  for (Index idx : indices) {
    if (idx < 0 || idx >= V) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " outside [0, " + std::to_string(V) + ")");
    }
  }
  Storage<S> out(n * row);
  for (Index i = 0; i < n; ++i) {
    out.segment(i * row, row) = table.data().segment(indices[static_cast<std::size_t>(i)] * row, row);
  }
  Shape out_shape = table.shape();
  out_shape[0] = n;
  auto result = Tensor<S>::from_op(std::move(out_shape), std::move(out), {table}, "gather_rows");
  if (result.requires_grad()) {
    std::vector<Index> idx(indices.begin(), indices.end());
    result.set_backward([tn = table.node(), idx, row, V](const Storage<S>& g) {
      Storage<S> dt = Storage<S>::Zero(V * row);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        dt.segment(idx[i] * row, row) += g.segment(static_cast<Index>(i) * row, row);
      }
      detail::accumulate<S>(*tn, dt);
    });
  }
  return result;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, Index stride) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) ||
      stride <= 0 || x.dim(2) < weight.dim(2) || x.dim(3) < weight.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index D = weight.dim(0), k = weight.dim(2);
  if (bias.numel() != D) throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(D) + " filters");
  const Index Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  const Index L = Ho * Wo, K = C * k * k;

  Storage<S> cols(B * L * K);
  Storage<S> out(B * D * L);
  const auto Wm = as_matrix<S>(weight.data(), D, K);
  for (Index b = 0; b < B; ++b) {
    im2col(x.data().data() + b * C * H * W, C, H, W, k, stride, cols.data() + b * L * K);
    auto O = as_matrix<S>(out, D, L, b * D * L);
    O.noalias() = Wm * as_matrix<S>(cols, L, K, b * L * K).transpose();
    O.colwise() += bias.data().matrix();
  }
  auto result = Tensor<S>::from_op({B, D, Ho, Wo}, std::move(out), {x, weight, bias}, "conv2d");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), wn = weight.node(), bn = bias.node(), cols = std::move(cols), B, C, H,
                         W, D, k, stride, L, K](const Storage<S>& g) {
      const auto Wm = as_matrix<S>(wn->data, D, K);
      Storage<S> dw = Storage<S>::Zero(D * K);
      Storage<S> db = Storage<S>::Zero(D);
      Storage<S> dx;
      if (xn->requires_grad) dx = Storage<S>::Zero(B * C * H * W);
      RowMat<S> dcols(L, K);
      for (Index b = 0; b < B; ++b) {
        const auto G = as_matrix<S>(g, D, L, b * D * L);
        if (wn->requires_grad) as_matrix<S>(dw, D, K).noalias() += G * as_matrix<S>(cols, L, K, b * L * K);
        if (bn->requires_grad) db += G.rowwise().sum().array();
        if (xn->requires_grad) {
          dcols.noalias() = G.transpose() * Wm;
          col2im_add(dcols.data(), C, H, W, k, stride, dx.data() + b * C * H * W);
        }
      }
      detail::accumulate<S>(*wn, dw);
      detail::accumulate<S>(*bn, db);
      if (xn->requires_grad) detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

template <typename S>
Tensor<S> patchify(const Tensor<S>& x, Index patch) {
  if (x.rank() != 4 || patch <= 0 || x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
    throw ShapeError("patchify: " + shape_str(x.shape()) + " is not divisible into " +
                     std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index L = (H / patch) * (W / patch), K = C * patch * patch;
  Storage<S> out(B * L * K);
  for (Index b = 0; b < B; ++b) {
    im2col(x.data().data() + b * C * H * W, C, H, W, patch, patch, out.data() + b * L * K);
  }
  auto result = Tensor<S>::from_op({B, L, K}, std::move(out), {x}, "patchify");
  if (result.requires_grad()) {
    result.set_backward([xn = x.node(), B, C, H, W, L, K, patch](const Storage<S>& g) {
      Storage<S> dx = Storage<S>::Zero(B * C * H * W);
      for (Index b = 0; b < B; ++b) {
        col2im_add(g.data() + b * L * K, C, H, W, patch, patch, dx.data() + b * C * H * W);
      }
      detail::accumulate<S>(*xn, dx);
    });
  }
  return result;
}

#define BORNOVIT_INSTANTIATE_OPS(S)                                                              \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);               \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> scale(const Tensor<S>&, S);                                                 \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                           \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                         \
  template Tensor<S> transpose_last2(const Tensor<S>&);                                          \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                 \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                                 \
  template Tensor<S> sum(const Tensor<S>&);                                                      \
  template Tensor<S> mean(const Tensor<S>&);                                                     \
  template Tensor<S> mean_last(const Tensor<S>&);                                                \
  template Tensor<S> var_last(const Tensor<S>&);                                                 \
  template Tensor<S> softmax(const Tensor<S>&);                                                  \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);        \
  template Tensor<S> gelu(const Tensor<S>&);                                                     \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                      \
  template Tensor<S> dropout(const Tensor<S>&, S, bool, std::mt19937_64*);                       \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);                      \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index);        \
  template Tensor<S> patchify(const Tensor<S>&, Index);

BORNOVIT_INSTANTIATE_OPS(float)
BORNOVIT_INSTANTIATE_OPS(double)

}  // namespace bornovit
