#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dvd/models.hpp"
#include "dvd/random.hpp"
#include "dvd/tensor.hpp"

namespace dvd {

enum class Norm { Linf, L2 };
enum class Init { Zero, RandomUniform };

struct PerturbationBudget {
  Norm norm = Norm::Linf;
  double eps = 0.0;
  std::size_t steps = 0;
  double step_size = 0.0;  // 0 selects 2 eps / steps
  Init init = Init::Zero;
  bool track_best = true;

  double alpha() const;
  void validate() const;
};

/// Per-sample objective values at a point and the gradient of their sum.
struct ObjectiveEval {
  std::vector<double> values;
  Tensor grad;
};

/// Batch objective over the leading axis of x. Samples must be independent:
/// the gradient row of sample i may depend on sample i only.
using Objective = std::function<ObjectiveEval(const Tensor& x)>;

/// Wraps a per-sample loss builder ([B] tensor from a leaf input) into an
/// Objective. Parameters are read but never written.
Objective make_objective(std::function<Tensor(const Tensor& x)> per_sample_loss);

struct AttackResult {
  Tensor delta;                            // shape of x
  std::vector<std::vector<double>> trace;  // trace[s][i]: objective of sample i at iterate s
  std::vector<std::size_t> best_step;      // per sample
  std::vector<double> best_objective;      // per sample
  std::vector<bool> success;               // targeted attacks only
  double max_norm = 0.0;                   // largest per-sample norm of delta
  std::size_t domain_violations = 0;       // entries of x + delta outside [0, 1]

  std::size_t batch() const { return best_objective.size(); }
};

/// Clamp to the eps-ball (per sample for L2), then to the image domain.
Tensor project(const Tensor& delta, const Tensor& x, const PerturbationBudget& budget);

AttackResult fgsm(const Objective& objective, const Tensor& x, double eps);

/// Projected sign (L-inf) or normalized (L2) gradient ascent. `rng` is used
/// only for random initialization and may be null otherwise.
AttackResult pgd(const Objective& objective, const Tensor& x, const PerturbationBudget& budget, Rng* rng = nullptr);

struct ApgdOptions {
  double momentum = 0.75;
  double rho = 0.75;
  double first_checkpoint = 0.22;
  double gap_decrease = 0.03;
  double min_gap = 0.06;
};

/// Checkpoint iterations for a budget of n steps.
std::vector<std::size_t> apgd_checkpoints(std::size_t n, const ApgdOptions& opt = {});

/// Momentum ascent with step halving at checkpoints and restarts from the
/// best point. Always returns the best point found per sample.
AttackResult apgd(const Objective& objective, const Tensor& x, const PerturbationBudget& budget, Rng* rng = nullptr,
                  const ApgdOptions& opt = {});

// ---------------------------------------------------------------------------

/// Attacks the rows `rows` (indices into the full batch) given their inputs.
using StageAttack = std::function<AttackResult(const Tensor& x, std::span<const std::size_t> rows)>;
/// Whether each perturbed row counts as broken.
using BreakPredicate = std::function<std::vector<bool>(const Tensor& x_adv, std::span<const std::size_t> rows)>;

struct AttackStage {
  std::string name;
  StageAttack attack;
};

struct CompositeResult {
  Tensor delta;
  std::vector<bool> broken;
  std::vector<int> breaking_stage;           // -1 when no stage broke the sample
  std::vector<std::size_t> attacked_per_stage;
  std::vector<double> best_objective;
};

/// Runs the stages in order, each on the samples still unbroken. A broken
/// sample keeps the perturbation of the first stage that broke it; others
/// keep their highest-objective perturbation.
CompositeResult composite_attack(const Tensor& x, std::span<const AttackStage> stages, const BreakPredicate& broken);

// ---------------------------------------------------------------------------

/// Contiguous subsequence test.
bool contains_sequence(std::span<const int> haystack, std::span<const int> needle);

/// APGD on the negative instruction NLL of `target` as the answer. Success
/// means the greedy answer at the returned point contains `target`.
AttackResult targeted_caption_attack(const Captioner& cap, const VisionEncoder& vision, const Tensor& x,
                                     const TokenSeq& instruction, const TokenSeq& target,
                                     const PerturbationBudget& budget, std::size_t max_new = 32);

}  // namespace dvd
