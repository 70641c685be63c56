#include "bornovit/tensor.hpp"

#include "bornovit/errors.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

namespace bornovit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

template <typename S>
Tensor<S>::Tensor(Shape shape, Storage data, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " values but data has " + std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename S>
Tensor<S>::Tensor(Shape shape, std::initializer_list<S> values, bool requires_grad)
    : Tensor(std::move(shape),
             Eigen::Map<const Storage>(values.begin(), static_cast<Index>(values.size())),
             requires_grad) {}

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S(0), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Storage::Constant(n, value), requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

template <typename S>
Index Tensor<S>::dim(int i) const {
  const int r = rank();
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) {
    throw ShapeError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(k)];
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename S>
S Tensor<S>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank does not match tensor shape " + shape_str(shape()));
  }
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    const Index d = node_->shape[axis++];
    if (i < 0 || i >= d) throw IndexError("index " + std::to_string(i) + " out of range");
    flat = flat * d + i;
  }
  return node_->data[flat];
}

template <typename S>
void Tensor<S>::set_requires_grad(bool on) {
  if (!node_->parents.empty()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}

template <typename S>
Tensor<S> Tensor<S>::clone() const {
  return Tensor(shape(), data(), requires_grad());
}

template <typename S>
Tensor<S> Tensor<S>::detach() const {
  return Tensor(shape(), data(), false);
}

template <typename S>
Tensor<S> Tensor<S>::from_op(Shape shape, Storage data, std::initializer_list<Tensor> inputs,
                             const char* op) {
  return from_op(std::move(shape), std::move(data), std::vector<Tensor>(inputs), op);
}

template <typename S>
Tensor<S> Tensor<S>::from_op(Shape shape, Storage data, const std::vector<Tensor>& inputs,
                             const char* op) {
  Tensor out(std::move(shape), std::move(data), false);
  out.node_->op = op;
  if (!GradMode::enabled()) return out;
  bool track = false;
  for (const auto& in : inputs) track = track || in.requires_grad();
  if (!track) return out;
  out.node_->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) out.node_->parents.push_back(in.node_);
  }
  return out;
}

template <typename S>
ComputationTape<S> ComputationTape<S>::record(const Tensor<S>& root) {
  ComputationTape tape;
  if (!root.requires_grad()) return tape;
  // Iterative post-order DFS; parents are emitted before children.
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename S>
void ComputationTape<S>::run_backward() {
  if (order_.empty()) return;
  // Interior gradients belong to this pass only; leaves keep accumulating.
  for (Node* node : order_) {
    if (node->backward) node->grad.resize(0);
  }
  Node* root = order_.back();
  detail::accumulate<S>(*root, Tensor<S>::Storage::Ones(root->data.size()));
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() > 0) node->backward(node->grad);
  }
}

template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("(undefined)")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a tensor that was not produced by recorded operations");
  }
  ComputationTape<S>::record(loss).run_backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class ComputationTape<float>;
template class ComputationTape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace bornovit
