#include "dvd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace dvd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using Backward = std::function<void(detail::Node&)>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": " + why + " for shape " + shape_str(a));
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
               Backward bw) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any && grad_recording_enabled()) {
    node->requires_grad = true;
    node->op = op;
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward = std::move(bw);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
               Backward bw) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any && grad_recording_enabled()) {
    node->requires_grad = true;
    node->op = op;
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward = std::move(bw);
  }
  return Tensor::from_node(std::move(node));
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.dim()) shape_fail(op, x.shape(), "axis " + std::to_string(axis) + " out of range");
}

// (outer, extent, inner) decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Maps each flat index of `a` onto the flat index of broadcast operand `b`.
struct Broadcast {
  enum class Kind { Same, Suffix, General } kind = Kind::Same;
  std::size_t b_numel = 1;
  std::vector<std::size_t> index;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::Same: return i;
      case Kind::Suffix: return i % b_numel;
      default: return index[i];
    }
  }
};

Broadcast make_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  bc.b_numel = numel_of(b);
  if (a == b) return bc;
  // Right-align b against a, ignoring leading unit extents of b.
  std::size_t lead = 0;
  while (lead < b.size() && b[lead] == 1 && b.size() - lead > a.size()) ++lead;
  Shape bb(b.begin() + static_cast<std::ptrdiff_t>(lead), b.end());
  if (bb.size() > a.size()) shape_fail(op, a, b);
  std::size_t off = a.size() - bb.size();
  std::size_t first = 0;
  while (first < bb.size() && bb[first] == 1) ++first;
  bool suffix = true;
  for (std::size_t i = 0; i < bb.size(); ++i) {
    if (bb[i] != a[off + i]) {
      if (bb[i] != 1) shape_fail(op, a, b);
      if (i >= first) suffix = false;
    }
  }
  // Leading unit extents of the aligned b keep the suffix layout valid.
  if (suffix) {
    bc.kind = Broadcast::Kind::Suffix;
    return bc;
  }
  bc.kind = Broadcast::Kind::General;
  Shape full(a.size(), 1);
  for (std::size_t i = 0; i < bb.size(); ++i) full[off + i] = bb[i];
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t st = 1;
  for (std::size_t i = a.size(); i-- > 0;) {
    bstride[i] = full[i] == 1 ? 0 : st;
    st *= full[i];
  }
  const std::size_t n = numel_of(a);
  bc.index.resize(n);
  std::vector<std::size_t> idx(a.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t bi = 0;
    for (std::size_t d = 0; d < a.size(); ++d) bi += idx[d] * bstride[d];
    bc.index[flat] = bi;
    for (std::size_t d = a.size(); d-- > 0;) {
      if (++idx[d] < a[d]) break;
      idx[d] = 0;
    }
  }
  return bc;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd f, DA dfa, DB dfb) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(op, a.shape(), b.shape()));
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i], bd[(*bc)(i)]);
  return make_op(op, a.shape(), std::move(out), {a, b}, [bc, dfa, dfb](detail::Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    const auto& g = self.gbuf;
    if (double* da = detail::adjoint(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfa(av[i], bv[(*bc)(i)]);
    }
    if (double* db = detail::adjoint(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t j = (*bc)(i);
        db[j] += g[i] * dfb(av[i], bv[j]);
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd f, Deriv df) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  return make_op(op, x.shape(), std::move(out), {x}, [df](detail::Node& self) {
    const auto& xv = self.parents[0]->data;
    const auto& yv = self.data;
    const auto& g = self.gbuf;
    if (double* dx = detail::adjoint(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(xv[i], yv[i]);
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_fail("matmul", as, bs);
  if (bs.size() == 2) {
    const std::size_t k = as.back();
    if (k != bs[0]) shape_fail("matmul", as, bs);
    const std::size_t m = a.numel() / k;
    const std::size_t n = bs[1];
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    Shape os = as;
    os.back() = n;
    return make_op("matmul", std::move(os), std::move(out), {a, b}, [m, k, n](detail::Node& self) {
      ConstMap g(self.gbuf.data(), m, n);
      if (double* da = detail::adjoint(self, 0)) {
        MutMap(da, m, k).noalias() += g * ConstMap(self.parents[1]->data.data(), k, n).transpose();
      }
      if (double* db = detail::adjoint(self, 1)) {
        MutMap(db, k, n).noalias() += ConstMap(self.parents[0]->data.data(), m, k).transpose() * g;
      }
    });
  }
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) shape_fail("matmul", as, bs);
  const std::size_t batch = as[0], m = as[1], k = as[2], n = bs[2];
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  }
  return make_op("matmul", Shape{batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](detail::Node& self) {
    const double* av = self.parents[0]->data.data();
    const double* bv = self.parents[1]->data.data();
    double* da = detail::adjoint(self, 0);
    double* db = detail::adjoint(self, 1);
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap g(self.gbuf.data() + i * m * n, m, n);
      if (da) MutMap(da + i * m * k, m, k).noalias() += g * ConstMap(bv + i * k * n, k, n).transpose();
      if (db) MutMap(db + i * k * n, k, n).noalias() += ConstMap(av + i * m * k, m, k).transpose() * g;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (b.numel() > a.numel()) return add(b, a);
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (b.numel() > a.numel()) return mul(b, a);
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      "gelu", x, [&](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: lower bound exceeds upper bound");
  return unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  return make_op("sum", Shape{1}, {s}, {x}, [](detail::Node& self) {
    if (double* dx = detail::adjoint(self, 0)) {
      const double g = self.gbuf[0];
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::size_t axis) {
  check_axis("sum", x, axis);
  const auto sp = split_axis(x.shape(), axis);
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  if (os.empty()) os.push_back(1);
  const auto xd = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.n + k) * sp.inner + i];
  return make_op("sum", std::move(os), std::move(out), {x}, [sp](detail::Node& self) {
    if (double* dx = detail::adjoint(self, 0)) {
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i) dx[(o * sp.n + k) * sp.inner + i] += self.gbuf[o * sp.inner + i];
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  check_axis("mean", x, axis);
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  const auto xd = x.data();
  return make_op("reshape", std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x},
                 [](detail::Node& self) {
                   if (double* dx = detail::adjoint(self, 0)) {
                     for (std::size_t i = 0; i < self.gbuf.size(); ++i) dx[i] += self.gbuf[i];
                   }
                 });
}

Tensor transpose(const Tensor& x, std::span<const std::size_t> perm) {
  const auto& s = x.shape();
  if (perm.size() != s.size()) shape_fail("transpose", s, "permutation rank mismatch");
  std::vector<bool> used(s.size(), false);
  for (auto p : perm) {
    if (p >= s.size() || used[p]) shape_fail("transpose", s, "invalid permutation");
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(s.size());
  std::size_t st = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    in_stride[i] = st;
    st *= s[i];
  }
  Shape os(s.size());
  std::vector<std::size_t> step(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    os[i] = s[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(s.size(), 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*src)[flat] = off;
    for (std::size_t d = s.size(); d-- > 0;) {
      off += step[d];
      if (++idx[d] < os[d]) break;
      off -= step[d] * os[d];
      idx[d] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*src)[i]];
  return make_op("transpose", std::move(os), std::move(out), {x}, [src](detail::Node& self) {
    if (double* dx = detail::adjoint(self, 0)) {
      for (std::size_t i = 0; i < self.gbuf.size(); ++i) dx[(*src)[i]] += self.gbuf[i];
    }
  });
}

Tensor transpose(const Tensor& x, std::initializer_list<std::size_t> perm) {
  return transpose(x, std::span<const std::size_t>(perm.begin(), perm.size()));
}

Tensor transpose(const Tensor& x) {
  if (x.dim() < 2) shape_fail("transpose", x.shape(), "need at least two axes");
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(x, perm);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", x, axis);
  if (begin >= end || end > x.shape()[axis]) {
    shape_fail("slice", x.shape(),
               "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " + std::to_string(axis));
  }
  const auto sp = split_axis(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape os = x.shape();
  os[axis] = len;
  const auto xd = x.data();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * sp.n + begin) * sp.inner), len * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner));
  return make_op("slice", std::move(os), std::move(out), {x}, [sp, begin, len](detail::Node& self) {
    if (double* dx = detail::adjoint(self, 0)) {
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < len * sp.inner; ++j)
          dx[(o * sp.n + begin) * sp.inner + j] += self.gbuf[o * len * sp.inner + j];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  check_axis("concat", parts[0], axis);
  const Shape& s0 = parts[0].shape();
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) shape_fail("concat", s0, s);
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  const auto sp = split_axis(os, axis);
  std::vector<double> out(numel_of(os));
  std::size_t base = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pd = parts[pi].data();
    const std::size_t len = extents[pi];
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + base) * sp.inner));
    base += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat", std::move(os), std::move(out), inputs, [sp, extents, total](detail::Node& self) {
    std::size_t base = 0;
    for (std::size_t pi = 0; pi < extents.size(); ++pi) {
      const std::size_t len = extents[pi];
      if (double* dx = detail::adjoint(self, pi)) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < len * sp.inner; ++j)
            dx[o * len * sp.inner + j] += self.gbuf[(o * total + base) * sp.inner + j];
      }
      base += len;
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.dim() != 2) shape_fail("embedding", table.shape(), "table must be [V,D]");
  if (numel_of(ids_shape) != ids.size()) shape_fail("embedding", ids_shape, "id count mismatch");
  const std::size_t vocab = table.shape()[0], width = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape os = ids_shape;
  os.push_back(width);
  const auto td = table.data();
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  auto saved = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_op("embedding", std::move(os), std::move(out), {table}, [saved, width](detail::Node& self) {
    if (double* dt = detail::adjoint(self, 0)) {
      for (std::size_t i = 0; i < saved->size(); ++i) {
        double* row = dt + static_cast<std::size_t>((*saved)[i]) * width;
        for (std::size_t j = 0; j < width; ++j) row[j] += self.gbuf[i * width + j];
      }
    }
  });
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  if (x.dim() != 2 || x.shape()[0] != index.size()) {
    shape_fail("pick", x.shape(), "expects [B,K] with B=" + std::to_string(index.size()));
  }
  const std::size_t k = x.shape()[1];
  const auto xd = x.data();
  std::vector<double> out(index.size());
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] >= k) throw ShapeError("pick: index " + std::to_string(index[b]) + " out of range " + std::to_string(k));
    out[b] = xd[b * k + index[b]];
  }
  auto saved = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  return make_op("pick", Shape{index.size()}, std::move(out), {x}, [saved, k](detail::Node& self) {
    if (double* dx = detail::adjoint(self, 0)) {
      for (std::size_t b = 0; b < saved->size(); ++b) dx[b * k + (*saved)[b]] += self.gbuf[b];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / width;
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gd[j] + bd[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [xhat, rstd, rows, width](detail::Node& self) {
                   const auto& g = self.gbuf;
                   const auto& gm = self.parents[1]->data;
                   double* dx = detail::adjoint(self, 0);
                   double* dg = detail::adjoint(self, 1);
                   double* db = detail::adjoint(self, 2);
                   const double inv_w = 1.0 / static_cast<double>(width);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* gr = g.data() + r * width;
                     const double* hr = xhat->data() + r * width;
                     if (dg || db) {
                       for (std::size_t j = 0; j < width; ++j) {
                         if (dg) dg[j] += gr[j] * hr[j];
                         if (db) db[j] += gr[j];
                       }
                     }
                     if (dx) {
                       double m1 = 0.0, m2 = 0.0;
                       for (std::size_t j = 0; j < width; ++j) {
                         const double dh = gr[j] * gm[j];
                         m1 += dh;
                         m2 += dh * hr[j];
                       }
                       m1 *= inv_w;
                       m2 *= inv_w;
                       for (std::size_t j = 0; j < width; ++j) {
                         dx[r * width + j] += (*rstd)[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                       }
                     }
                   }
                 });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const auto sp = split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = xd[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(xd[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [sp](detail::Node& self) {
    double* dx = detail::adjoint(self, 0);
    if (!dx) return;
    const auto& y = self.data;
    const auto& g = self.gbuf;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t at = base + k * sp.inner;
          dx[at] += y[at] * (g[at] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  check_axis("log_softmax", x, axis);
  const auto sp = split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = xd[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(xd[base + k * sp.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = xd[base + k * sp.inner] - lz;
    }
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x}, [sp](detail::Node& self) {
    double* dx = detail::adjoint(self, 0);
    if (!dx) return;
    const auto& y = self.data;
    const auto& g = self.gbuf;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double gs = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) gs += g[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t at = base + k * sp.inner;
          dx[at] += g[at] - std::exp(y[at]) * gs;
        }
      }
    }
  });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis) {
  check_axis("l2_normalize", x, axis);
  constexpr double kMinNorm = 1e-12;
  const auto sp = split_axis(x.shape(), axis);
  const auto xd = x.data();
  auto norms = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) ss += xd[base + k * sp.inner] * xd[base + k * sp.inner];
      const double nrm = std::max(std::sqrt(ss), kMinNorm);
      (*norms)[o * sp.inner + i] = nrm;
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = xd[base + k * sp.inner] / nrm;
    }
  }
  return make_op("l2_normalize", x.shape(), std::move(out), {x}, [sp, norms](detail::Node& self) {
    double* dx = detail::adjoint(self, 0);
    if (!dx) return;
    const auto& y = self.data;
    const auto& g = self.gbuf;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        const double nrm = (*norms)[o * sp.inner + i];
        // Below the floor the op is a plain scaling by 1/kMinNorm.
        const bool floored = nrm <= kMinNorm;
        double dot = 0.0;
        if (!floored) {
          for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        }
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t at = base + k * sp.inner;
          dx[at] += (g[at] - y[at] * dot) / nrm;
        }
      }
    }
  });
}

}  // namespace dvd
