#include "dvd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dvd/losses.hpp"
#include "dvd/ops.hpp"

namespace dvd {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct Layout {
  std::size_t batch;
  std::size_t per;
};

Layout layout_of(const Tensor& x) {
  if (x.dim() < 1) throw ShapeError("attack: input needs a leading batch axis");
  return {x.size(0), x.numel() / x.size(0)};
}

// In-place projection on raw buffers.
void project_inplace(std::vector<double>& d, std::span<const double> x, const PerturbationBudget& b, Layout lay) {
  if (b.norm == Norm::Linf) {
    for (auto& v : d) v = std::clamp(v, -b.eps, b.eps);
  } else {
    for (std::size_t i = 0; i < lay.batch; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < lay.per; ++k) s += d[i * lay.per + k] * d[i * lay.per + k];
      const double n = std::sqrt(s);
      if (n > b.eps) {
        const double f = b.eps / n;
        for (std::size_t k = 0; k < lay.per; ++k) d[i * lay.per + k] *= f;
      }
    }
  }
  for (std::size_t j = 0; j < d.size(); ++j) d[j] = std::clamp(d[j], -x[j], 1.0 - x[j]);
}

Tensor with_delta(const Tensor& x, const std::vector<double>& d) {
  auto xv = x.data();
  std::vector<double> out(d.size());
  for (std::size_t j = 0; j < d.size(); ++j) out[j] = xv[j] + d[j];
  return Tensor(x.shape(), std::move(out));
}

ObjectiveEval evaluate(const Objective& f, const Tensor& x, const std::vector<double>& d, std::size_t step,
                       Layout lay) {
  ObjectiveEval e;
  try {
    e = f(with_delta(x, d));
  } catch (const NonFiniteError& err) {
    throw NonFiniteError("attack step " + std::to_string(step) + ": " + err.what());
  }
  if (e.values.size() != lay.batch) throw ShapeError("attack: objective returned wrong number of values");
  if (e.grad.defined()) {
    if (e.grad.numel() != d.size()) throw ShapeError("attack: objective gradient has wrong size");
    for (double g : e.grad.data()) {
      if (!std::isfinite(g)) throw NonFiniteError("attack step " + std::to_string(step) + ": non-finite gradient");
    }
  }
  return e;
}

std::vector<double> initial_delta(const Tensor& x, const PerturbationBudget& b, Rng* rng, Layout lay) {
  std::vector<double> d(x.numel(), 0.0);
  if (b.init == Init::RandomUniform && b.eps > 0.0) {
    if (!rng) throw std::invalid_argument("attack: random init needs a generator");
    if (b.norm == Norm::Linf) {
      for (auto& v : d) v = rng->uniform(-b.eps, b.eps);
    } else {
      for (std::size_t i = 0; i < lay.batch; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < lay.per; ++k) {
          d[i * lay.per + k] = rng->normal();
          s += d[i * lay.per + k] * d[i * lay.per + k];
        }
        const double f = b.eps * rng->uniform() / std::max(std::sqrt(s), 1e-12);
        for (std::size_t k = 0; k < lay.per; ++k) d[i * lay.per + k] *= f;
      }
    }
    project_inplace(d, x.data(), b, lay);
  }
  return d;
}

// Adds the step direction of g scaled by `step[i]` to d.
void ascend(std::vector<double>& d, std::span<const double> g, const std::vector<double>& step, Norm norm,
            Layout lay) {
  for (std::size_t i = 0; i < lay.batch; ++i) {
    const std::size_t o = i * lay.per;
    if (norm == Norm::Linf) {
      for (std::size_t k = 0; k < lay.per; ++k) d[o + k] += step[i] * sign(g[o + k]);
    } else {
      double s = 0.0;
      for (std::size_t k = 0; k < lay.per; ++k) s += g[o + k] * g[o + k];
      if (s == 0.0) continue;
      const double f = step[i] / std::sqrt(s);
      for (std::size_t k = 0; k < lay.per; ++k) d[o + k] += f * g[o + k];
    }
  }
}

void certify(AttackResult& r, const Tensor& x, const PerturbationBudget& b, Layout lay) {
  auto d = r.delta.data();
  auto xv = x.data();
  r.max_norm = 0.0;
  for (std::size_t i = 0; i < lay.batch; ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < lay.per; ++k) {
      const double v = std::abs(d[i * lay.per + k]);
      n = b.norm == Norm::Linf ? std::max(n, v) : n + v * v;
    }
    r.max_norm = std::max(r.max_norm, b.norm == Norm::Linf ? n : std::sqrt(n));
  }
  r.domain_violations = 0;
  for (std::size_t j = 0; j < d.size(); ++j) {
    const double v = xv[j] + d[j];
    r.domain_violations += v < 0.0 || v > 1.0;
  }
}

void check_input(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("attack: input outside [0, 1]");
  }
}

// Identity result for an empty budget: one evaluation, repeated.
AttackResult null_attack(const Objective& f, const Tensor& x, const PerturbationBudget& b, Layout lay) {
  AttackResult r;
  r.delta = Tensor(x.shape(), 0.0);
  auto e = evaluate(f, x, std::vector<double>(x.numel(), 0.0), 0, lay);
  r.trace.assign(b.steps + 1, e.values);
  r.best_step.assign(lay.batch, 0);
  r.best_objective = e.values;
  certify(r, x, b, lay);
  return r;
}

}  // namespace

double PerturbationBudget::alpha() const {
  if (step_size > 0.0) return step_size;
  return steps == 0 ? 0.0 : 2.0 * eps / static_cast<double>(steps);
}

void PerturbationBudget::validate() const {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw std::invalid_argument("budget: eps must be a finite value >= 0");
  if (step_size < 0.0) throw std::invalid_argument("budget: negative step size");
}

Objective make_objective(std::function<Tensor(const Tensor& x)> per_sample_loss) {
  return [f = std::move(per_sample_loss)](const Tensor& x) {
    Tensor leaf = x.detach().set_requires_grad(true);
    Tensor per = f(leaf);
    if (per.numel() != x.size(0)) {
      throw ShapeError("objective: expected " + std::to_string(x.size(0)) + " values, got " +
                       std::to_string(per.numel()));
    }
    ObjectiveEval e;
    e.values.assign(per.data().begin(), per.data().end());
    if (per.requires_grad()) {
      e.grad = grad(sum(per), leaf);
    } else {
      e.grad = Tensor(x.shape(), 0.0);
    }
    return e;
  };
}

Tensor project(const Tensor& delta, const Tensor& x, const PerturbationBudget& budget) {
  if (delta.shape() != x.shape()) {
    throw ShapeError("project: " + shape_str(delta.shape()) + " vs " + shape_str(x.shape()));
  }
  std::vector<double> d(delta.data().begin(), delta.data().end());
  project_inplace(d, x.data(), budget, layout_of(x));
  return Tensor(x.shape(), std::move(d));
}

AttackResult fgsm(const Objective& objective, const Tensor& x, double eps) {
  PerturbationBudget b;
  b.eps = eps;
  b.steps = 1;
  b.validate();
  check_input(x);
  const auto lay = layout_of(x);
  if (eps == 0.0) return null_attack(objective, x, b, lay);
  std::vector<double> d(x.numel(), 0.0);
  auto e = evaluate(objective, x, d, 0, lay);
  ascend(d, e.grad.data(), std::vector<double>(lay.batch, eps), Norm::Linf, lay);
  project_inplace(d, x.data(), b, lay);
  AttackResult r;
  r.trace.push_back(e.values);
  r.trace.push_back(evaluate(objective, x, d, 1, lay).values);
  r.best_objective = r.trace.back();
  r.best_step.assign(lay.batch, 1);
  r.delta = Tensor(x.shape(), std::move(d));
  certify(r, x, b, lay);
  return r;
}

AttackResult pgd(const Objective& objective, const Tensor& x, const PerturbationBudget& budget, Rng* rng) {
  budget.validate();
  check_input(x);
  const auto lay = layout_of(x);
  if (budget.eps == 0.0) return null_attack(objective, x, budget, lay);
  auto d = initial_delta(x, budget, rng, lay);
  const std::vector<double> step(lay.batch, budget.alpha());
  AttackResult r;
  std::vector<double> best_d = d;
  r.best_step.assign(lay.batch, 0);
  r.best_objective.assign(lay.batch, -std::numeric_limits<double>::infinity());

  auto record = [&](const ObjectiveEval& e, std::size_t s) {
    r.trace.push_back(e.values);
    if (!budget.track_best) return;
    for (std::size_t i = 0; i < lay.batch; ++i) {
      if (e.values[i] > r.best_objective[i]) {
        r.best_objective[i] = e.values[i];
        r.best_step[i] = s;
        std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * lay.per), lay.per,
                    best_d.begin() + static_cast<std::ptrdiff_t>(i * lay.per));
      }
    }
  };

  for (std::size_t s = 0; s < budget.steps; ++s) {
    auto e = evaluate(objective, x, d, s, lay);
    record(e, s);
    ascend(d, e.grad.data(), step, budget.norm, lay);
    project_inplace(d, x.data(), budget, lay);
  }
  // Training attacks skip the evaluation of the final iterate.
  if (budget.track_best || budget.steps == 0) record(evaluate(objective, x, d, budget.steps, lay), budget.steps);
  if (budget.track_best) {
    r.delta = Tensor(x.shape(), std::move(best_d));
  } else {
    r.best_step.assign(lay.batch, r.trace.size() - 1);
    r.best_objective = r.trace.back();
    r.delta = Tensor(x.shape(), std::move(d));
  }
  certify(r, x, budget, lay);
  return r;
}

std::vector<std::size_t> apgd_checkpoints(std::size_t n, const ApgdOptions& opt) {
  // Integer gaps as in the reference schedule: 22, 19, 16, ... down to 6 for n = 100.
  auto frac = [n](double f) { return std::max<std::size_t>(static_cast<std::size_t>(f * static_cast<double>(n)), 1); };
  std::size_t gap = frac(opt.first_checkpoint);
  const std::size_t decr = frac(opt.gap_decrease);
  const std::size_t min_gap = frac(opt.min_gap);
  std::vector<std::size_t> w;
  for (std::size_t c = gap; c < n; c += gap) {
    w.push_back(c);
    gap = std::max(gap > decr ? gap - decr : 0, min_gap);
  }
  return w;
}

AttackResult apgd(const Objective& objective, const Tensor& x, const PerturbationBudget& budget, Rng* rng,
                  const ApgdOptions& opt) {
  budget.validate();
  check_input(x);
  const auto lay = layout_of(x);
  if (budget.eps == 0.0) return null_attack(objective, x, budget, lay);
  if (budget.steps < 2) throw std::invalid_argument("apgd: needs at least 2 steps");
  const std::size_t n = budget.steps;
  const auto checkpoints = apgd_checkpoints(n, opt);
  const auto xv = x.data();

  std::vector<double> eta(lay.batch, 2.0 * budget.eps);
  auto d = initial_delta(x, budget, rng, lay);
  auto e = evaluate(objective, x, d, 0, lay);
  AttackResult r;
  r.trace.push_back(e.values);
  std::vector<double> best_d = d;
  std::vector<double> best_grad(e.grad.data().begin(), e.grad.data().end());
  std::vector<double> grad = best_grad;
  r.best_objective = e.values;
  r.best_step.assign(lay.batch, 0);

  // First step has no momentum.
  std::vector<double> prev = d;
  ascend(d, grad, eta, budget.norm, lay);
  project_inplace(d, xv, budget, lay);

  std::vector<double> last_value = e.values;
  std::vector<std::size_t> improvements(lay.batch, 0);
  std::vector<double> eta_at_checkpoint = eta;
  std::vector<double> best_at_checkpoint = r.best_objective;
  std::size_t window_start = 0;
  std::size_t next_cp = 0;

  for (std::size_t k = 1; k <= n; ++k) {
    e = evaluate(objective, x, d, k, lay);
    r.trace.push_back(e.values);
    grad.assign(e.grad.data().begin(), e.grad.data().end());
    for (std::size_t i = 0; i < lay.batch; ++i) {
      improvements[i] += e.values[i] > last_value[i];
      last_value[i] = e.values[i];
      if (e.values[i] > r.best_objective[i]) {
        r.best_objective[i] = e.values[i];
        r.best_step[i] = k;
        const auto o = static_cast<std::ptrdiff_t>(i * lay.per);
        std::copy_n(d.begin() + o, lay.per, best_d.begin() + o);
        std::copy_n(grad.begin() + o, lay.per, best_grad.begin() + o);
      }
    }
    if (k == n) break;

    bool at_checkpoint = next_cp < checkpoints.size() && k == checkpoints[next_cp];
    std::vector<bool> restart(lay.batch, false);
    if (at_checkpoint) {
      const double window = static_cast<double>(k - window_start);
      for (std::size_t i = 0; i < lay.batch; ++i) {
        const bool few_gains = static_cast<double>(improvements[i]) < opt.rho * window;
        const bool stalled = eta_at_checkpoint[i] == eta[i] && best_at_checkpoint[i] == r.best_objective[i];
        if (few_gains || stalled) {
          eta[i] *= 0.5;
          restart[i] = true;
        }
        improvements[i] = 0;
        eta_at_checkpoint[i] = eta[i];
        best_at_checkpoint[i] = r.best_objective[i];
      }
      window_start = k;
      ++next_cp;
    }

    for (std::size_t i = 0; i < lay.batch; ++i) {
      if (!restart[i]) continue;
      const auto o = static_cast<std::ptrdiff_t>(i * lay.per);
      std::copy_n(best_d.begin() + o, lay.per, d.begin() + o);
      std::copy_n(best_d.begin() + o, lay.per, prev.begin() + o);
      std::copy_n(best_grad.begin() + o, lay.per, grad.begin() + o);
    }

    // z = P(x_k + eta * dir(grad)); x_{k+1} = P(x_k + a (z - x_k) + (1 - a)(x_k - x_{k-1}))
    std::vector<double> z = d;
    ascend(z, grad, eta, budget.norm, lay);
    project_inplace(z, xv, budget, lay);
    const double a = opt.momentum;
    std::vector<double> next(d.size());
    for (std::size_t j = 0; j < d.size(); ++j) next[j] = d[j] + a * (z[j] - d[j]) + (1.0 - a) * (d[j] - prev[j]);
    project_inplace(next, xv, budget, lay);
    prev = std::move(d);
    d = std::move(next);
  }
  r.delta = Tensor(x.shape(), std::move(best_d));
  certify(r, x, budget, lay);
  return r;
}

// ---------------------------------------------------------------------------

CompositeResult composite_attack(const Tensor& x, std::span<const AttackStage> stages, const BreakPredicate& broken) {
  if (stages.empty()) throw std::invalid_argument("composite_attack: no stages");
  const auto lay = layout_of(x);
  const auto xv = x.data();
  CompositeResult out;
  std::vector<double> delta(x.numel(), 0.0);
  out.broken.assign(lay.batch, false);
  out.breaking_stage.assign(lay.batch, -1);
  out.best_objective.assign(lay.batch, -std::numeric_limits<double>::infinity());

  Shape sub_shape = x.shape();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < lay.batch; ++i) {
      if (!out.broken[i]) rows.push_back(i);
    }
    out.attacked_per_stage.push_back(rows.size());
    if (rows.empty()) continue;
    std::vector<double> sub;
    sub.reserve(rows.size() * lay.per);
    for (auto i : rows) sub.insert(sub.end(), xv.begin() + static_cast<std::ptrdiff_t>(i * lay.per),
                                   xv.begin() + static_cast<std::ptrdiff_t>((i + 1) * lay.per));
    sub_shape[0] = rows.size();
    Tensor xs(sub_shape, std::move(sub));
    auto res = stages[s].attack(xs, rows);
    if (res.delta.shape() != xs.shape() || res.batch() != rows.size()) {
      throw ShapeError("composite_attack: stage '" + stages[s].name + "' returned a mismatched result");
    }
    auto hit = broken(with_delta(xs, {res.delta.data().begin(), res.delta.data().end()}), rows);
    auto rd = res.delta.data();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const std::size_t i = rows[j];
      const bool take = hit[j] || res.best_objective[j] > out.best_objective[i];
      if (take) {
        std::copy_n(rd.begin() + static_cast<std::ptrdiff_t>(j * lay.per), lay.per,
                    delta.begin() + static_cast<std::ptrdiff_t>(i * lay.per));
        out.best_objective[i] = std::max(out.best_objective[i], res.best_objective[j]);
      }
      if (hit[j]) {
        out.broken[i] = true;
        out.breaking_stage[i] = static_cast<int>(s);
      }
    }
  }
  out.delta = Tensor(x.shape(), std::move(delta));
  return out;
}

// ---------------------------------------------------------------------------

bool contains_sequence(std::span<const int> haystack, std::span<const int> needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

AttackResult targeted_caption_attack(const Captioner& cap, const VisionEncoder& vision, const Tensor& x,
                                     const TokenSeq& instruction, const TokenSeq& target,
                                     const PerturbationBudget& budget, std::size_t max_new) {
  if (target.empty() || target.size() > max_new) {
    throw std::invalid_argument("targeted_caption_attack: target length must be in [1, max_new]");
  }
  const std::size_t b = x.size(0);
  std::vector<TokenSeq> answers(b, target);
  const auto batch = make_instruction_batch(x, instruction, answers);
  auto objective = make_objective([&](const Tensor& xa) -> Tensor {
    auto bb = batch;
    bb.images = xa;
    return scale(answer_nll(caption_logits(cap, vision, bb), bb), -1.0);
  });
  auto r = apgd(objective, x, budget);
  auto xv = x.data();
  auto dv = r.delta.data();
  std::vector<double> adv(xv.size());
  for (std::size_t j = 0; j < adv.size(); ++j) adv[j] = xv[j] + dv[j];
  auto outputs = generate(cap, vision, Tensor(x.shape(), std::move(adv)), instruction, max_new);
  r.success.resize(b);
  for (std::size_t i = 0; i < b; ++i) r.success[i] = contains_sequence(outputs[i], target);
  return r;
}

}  // namespace dvd
