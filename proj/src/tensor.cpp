#include "msdet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace msdet {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

void Node::accumulate_grad(std::span<const double> g) {
  auto& dst = ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw TensorError("tensor rank must be at least 1");
  for (auto d : shape) {
    if (d == 0) throw TensorError("zero-sized dimension in shape " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  std::vector<double> v(msdet::numel(shape), value);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != msdet::numel(shape)) {
    throw TensorError("value count " + std::to_string(values.size()) + " does not match shape " +
                      shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_values({1}, {value}, requires_grad); }

const detail::Node& Tensor::checked() const {
  if (!node_) throw TensorError("use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw TensorError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().values.size(); }

std::span<const double> Tensor::values() const { return checked().values; }

std::span<double> Tensor::mutable_values() {
  checked();
  return node_->values;
}

double Tensor::item() const {
  const auto& n = checked();
  if (n.values.size() != 1) throw TensorError("item() on tensor of shape " + shape_str(n.shape));
  return n.values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return checked().inputs.empty() && !node_->backward; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& n = checked();
  if (n.grad.empty()) throw TensorError("tensor has no gradient");
  return n.grad;
}

void Tensor::zero_grad() {
  checked();
  node_->grad.clear();
}

const char* Tensor::op_name() const { return checked().op; }

Tensor Tensor::detach(bool requires_grad) const {
  const auto& n = checked();
  return from_values(n.shape, n.values, requires_grad);
}

std::vector<const detail::Node*> topological_order(const Tensor& root) {
  std::vector<const detail::Node*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS; operands are pushed in declaration order.
  std::vector<std::pair<const detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  const auto& n = checked();
  if (n.values.size() != 1) throw TensorError("backward() requires a scalar, got " + shape_str(n.shape));
  if (!n.requires_grad) throw TensorError("backward() on a tensor that does not require grad");
  auto order = topological_order(*this);
  // Interior gradients belong to one sweep; leaves accumulate across sweeps.
  for (const auto* node : order) {
    if (node->backward) const_cast<detail::Node*>(node)->grad.clear();
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = const_cast<detail::Node*>(*it);
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace msdet
