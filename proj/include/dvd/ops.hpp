#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dvd/tensor.hpp"

// Differentiable primitives. Every function validates shapes (ShapeError
// naming the primitive and operand shapes) and rejects non-finite outputs
// (NonFiniteError).
namespace dvd {

// [M,K]x[K,N]; [...,M,K]x[K,N] with shared right operand; [B,M,K]x[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops. `b` broadcasts onto `a` (right-aligned, extents
// equal or 1); the result has the shape of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
/// General axis permutation; output axis i is input axis perm[i].
Tensor transpose(const Tensor& x, std::span<const std::size_t> perm);
Tensor transpose(const Tensor& x, std::initializer_list<std::size_t> perm);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// Rows of `table` [V,D] selected by `ids`; result shape is ids_shape + [D].
Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape);
/// Per-row element selection: x [B,K], index[b] in [0,K) -> [B].
Tensor pick(const Tensor& x, std::span<const std::size_t> index);

/// Normalizes over the last axis, then applies gamma/beta of shape [D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor l2_normalize(const Tensor& x, std::size_t axis);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

}  // namespace dvd
