#include "dvd/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dvd {

OptimizerState OptimizerState::sgd(double lr, double momentum, double weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::SgdMomentum;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

OptimizerState OptimizerState::adamw(double lr, double weight_decay, double beta1, double beta2, double eps) {
  OptimizerState s;
  s.kind = OptimizerKind::AdamW;
  s.lr = lr;
  s.weight_decay = weight_decay;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

namespace {

void ensure_buffers(OptimizerState& s, const ParamList& params) {
  const bool wants_first = s.kind == OptimizerKind::AdamW || s.momentum != 0.0;
  const bool wants_second = s.kind == OptimizerKind::AdamW;
  auto init = [&](std::vector<std::vector<double>>& buf, bool wanted) {
    if (!wanted) {
      buf.clear();
      return;
    }
    if (buf.empty()) {
      for (const auto& p : params) buf.emplace_back(p.value.numel(), 0.0);
    }
    if (buf.size() != params.size()) throw ShapeError("optimizer_step: parameter count changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (buf[i].size() != params[i].value.numel()) {
        throw ShapeError("optimizer_step: moment buffer does not match parameter " + params[i].name);
      }
    }
  };
  init(s.first_moment, wants_first);
  init(s.second_moment, wants_second);
}

}  // namespace

void optimizer_step(OptimizerState& s, const ParamList& params, std::span<const Tensor> grads) {
  if (grads.size() != params.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw ShapeError("optimizer_step: gradient shape " + shape_str(grads[i].shape()) + " does not match parameter " +
                       params[i].name + " " + shape_str(params[i].value.shape()));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) throw NonFiniteError("optimizer_step: non-finite gradient for parameter " + params[i].name);
    }
  }
  ensure_buffers(s, params);
  const std::uint64_t t = s.step + 1;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].value;
    auto w = p.data_mut();
    auto g = grads[i].data();
    if (s.kind == OptimizerKind::SgdMomentum) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        double d = g[j] + s.weight_decay * w[j];
        if (s.momentum != 0.0) {
          double& buf = s.first_moment[i][j];
          buf = t == 1 ? d : s.momentum * buf + d;
          d = buf;
        }
        w[j] -= s.lr * d;
      }
    } else {
      const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
      auto& m = s.first_moment[i];
      auto& v = s.second_moment[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        w[j] -= s.lr * s.weight_decay * w[j];
        m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
        v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
      }
    }
  }
  s.step = t;
}

void optimizer_step(OptimizerState& s, const ParamList& params) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(p.value.has_grad() ? p.value.grad_tensor() : Tensor(p.value.shape(), 0.0));
  }
  optimizer_step(s, params, grads);
}

void zero_grads(const ParamList& params) {
  for (auto p : params) p.value.zero_grad();
}

}  // namespace dvd
