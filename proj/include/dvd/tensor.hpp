#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvd {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // persistent leaf gradient, empty until populated
  std::vector<double> gbuf;  // scratch adjoint, only alive during a backward pass
  bool requires_grad = false;
  bool needed = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return op == nullptr; }
};

// Adjoint buffer of a parent if it participates in the current pass.
inline double* adjoint(Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  return p.needed ? p.gbuf.data() : nullptr;
}

}  // namespace detail

/// Dense row-major tensor of doubles with optional reverse-mode gradient.
///
/// Tensor is a shared handle: copies alias the same storage and graph node.
/// Operations in ops.hpp record a graph edge whenever an input requires a
/// gradient and recording has not been disabled with NoGradGuard.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable view of the values. Only leaves may be written.
  std::span<double> data_mut();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// A new leaf holding a copy of the values, disconnected from any graph.
  Tensor detach() const;
  /// Deep copy that keeps the requires_grad flag but drops graph history.
  Tensor clone() const;
  const char* op_name() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_recording_enabled();

/// Populates `grad` of every requires_grad leaf reachable from the scalar
/// `root`, accumulating into existing gradients. The graph is released
/// afterwards.
void backward(const Tensor& root);

/// Gradients of the scalar `root` with respect to `wrt` only. Leaf `grad`
/// fields are left untouched. The graph is released afterwards.
std::vector<Tensor> grad(const Tensor& root, std::span<const Tensor> wrt);
Tensor grad(const Tensor& root, const Tensor& wrt);

/// A named trainable tensor.
struct Param {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<Param>;

std::uint64_t checksum(const ParamList& params);

/// 64-bit FNV-1a over the little-endian bytes of the values.
std::uint64_t checksum(std::span<const double> values);
std::uint64_t checksum(std::span<const Tensor> tensors);

}  // namespace dvd
