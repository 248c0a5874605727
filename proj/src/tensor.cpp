#include "dvd/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace dvd {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + ": non-finite value");
  }
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  if (numel_of(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  check_finite(values, "tensor");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  return n;
}

thread_local int no_grad_depth = 0;

}  // namespace

Tensor::Tensor(Shape shape, double fill)
    : node_(make_leaf(shape, std::vector<double>(numel_of(shape), fill))) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(make_leaf(std::move(shape), std::move(values))) {}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw GraphError("tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw GraphError("tensor: undefined");
  return node_->data;
}

std::span<double> Tensor::data_mut() {
  if (!node_) throw GraphError("tensor: undefined");
  if (!node_->is_leaf()) throw GraphError("tensor: cannot mutate a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw GraphError("tensor: undefined");
  if (!node_->is_leaf()) throw GraphError("set_requires_grad: only leaves carry the flag");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw GraphError("grad: tensor has no gradient");
  return node_->grad;
}

Tensor Tensor::grad_tensor() const {
  return Tensor(shape(), std::vector<double>(grad().begin(), grad().end()));
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  return Tensor(shape(), std::vector<double>(data().begin(), data().end()));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = requires_grad();
  return t;
}

const char* Tensor::op_name() const { return node_ && node_->op ? node_->op : "leaf"; }

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_recording_enabled() { return no_grad_depth == 0; }

namespace {

// Post-order over the recorded graph: parents precede children.
std::vector<detail::Node*> topo_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void release(std::vector<detail::Node*>& order) {
  for (auto* n : order) {
    n->gbuf.clear();
    n->gbuf.shrink_to_fit();
    n->needed = false;
    if (!n->is_leaf()) {
      n->parents.clear();
      n->backward = nullptr;
    }
  }
}

void check_root(const Tensor& root, const char* who) {
  if (!root.defined()) throw GraphError(std::string(who) + ": undefined root");
  if (root.numel() != 1) {
    throw GraphError(std::string(who) + ": root must be scalar, got shape " + shape_str(root.shape()));
  }
  auto* n = root.node();
  if (!n->requires_grad || (!n->is_leaf() && !n->backward)) {
    throw GraphError(std::string(who) + ": root is detached from any recorded graph");
  }
}

// Runs the reverse sweep. `is_target` marks nodes whose adjoint is wanted.
template <typename Pred>
std::vector<detail::Node*> sweep(detail::Node* root, Pred is_target) {
  auto order = topo_order(root);
  for (auto* n : order) {
    bool needed = is_target(n);
    for (auto& p : n->parents) needed = needed || p->needed;
    n->needed = needed;
  }
  if (!root->needed) {
    release(order);
    throw GraphError("backward: root does not depend on any requested tensor");
  }
  for (auto* n : order) {
    if (n->needed) n->gbuf.assign(n->data.size(), 0.0);
  }
  root->gbuf[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->needed || n->is_leaf()) continue;
    n->backward(*n);
    check_finite(n->gbuf, n->op);
  }
  return order;
}

}  // namespace

void backward(const Tensor& root) {
  check_root(root, "backward");
  auto order = sweep(root.node(), [](detail::Node* n) { return n->is_leaf() && n->requires_grad; });
  for (auto* n : order) {
    if (!n->is_leaf() || !n->needed) continue;
    check_finite(n->gbuf, "backward");
    if (n->grad.empty()) {
      n->grad = n->gbuf;
    } else {
      for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->gbuf[i];
    }
  }
  release(order);
}

std::vector<Tensor> grad(const Tensor& root, std::span<const Tensor> wrt) {
  check_root(root, "grad");
  std::unordered_set<detail::Node*> targets;
  for (const auto& t : wrt) {
    if (!t.defined() || !t.requires_grad()) throw GraphError("grad: target does not require grad");
    targets.insert(t.node());
  }
  auto order = sweep(root.node(), [&](detail::Node* n) { return targets.count(n) > 0; });
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto* n = t.node();
    if (n->needed) {
      out.emplace_back(n->shape, n->gbuf);
    } else {
      out.emplace_back(n->shape, 0.0);
    }
  }
  release(order);
  return out;
}

Tensor grad(const Tensor& root, const Tensor& wrt) {
  return std::move(grad(root, std::span<const Tensor>(&wrt, 1)).front());
}

std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::uint64_t checksum(std::span<const Tensor> tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    h ^= checksum(t.data());
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t checksum(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    h ^= checksum(p.value.data());
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace dvd
