#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/attacks.hpp"
#include "dvd/data.hpp"
#include "dvd/models.hpp"

namespace dvd {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Class text embeddings: per class, the mean of the template embeddings,
/// re-normalized.
struct ZeroShotHead {
  std::vector<std::string> classes;
  std::vector<std::string> templates;  // "{class}" marks the substitution
  Tensor weights;                      // [K, D], unit rows

  std::size_t num_classes() const { return classes.size(); }
};

std::vector<std::string> default_prompt_templates();
std::vector<std::string> default_class_names();

ZeroShotHead build_zero_shot_head(const DualEncoder& model, const std::vector<std::string>& classes,
                                  const std::vector<std::string>& templates);

struct Classification {
  std::vector<int> labels;  // argmax per row, ties toward the lowest index
  Tensor logits;            // [B, K] cosines
};

Classification classify(const ZeroShotHead& head, const Tensor& image_embeddings);

/// Differentiable zero-shot logits scaled by the model's inverse temperature.
Tensor zero_shot_logits(const DualEncoder& model, const ZeroShotHead& head, const Tensor& images);

/// Validation-split indices shuffled by `seed`, first `count` kept.
std::vector<std::size_t> eval_subset(const Dataset& data, std::size_t count, std::uint64_t seed);

struct RobustEval {
  std::vector<std::size_t> indices;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;              // after every stage
  std::vector<double> accuracy_after_stage;  // robust accuracy after stages 1..n
  std::vector<std::string> stage_names;
  std::vector<double> clean_per_class;       // 0 for classes absent from the subset
  std::vector<double> robust_per_class;
  std::vector<std::size_t> per_class_count;
};

struct RobustEvalOptions {
  double eps = 4.0 / 255.0;
  std::size_t steps = 20;
  std::size_t samples = 160;
  std::uint64_t seed = 0;
  bool use_ce = true;
  bool use_dlr = true;
  std::size_t batch_size = 64;
};

/// Zero-shot accuracy under APGD-CE followed by APGD-DLR on the samples the
/// first stage did not break. A sample is robust iff it is classified
/// correctly and no stage flips it.
RobustEval eval_robust_accuracy(const DualEncoder& model, const ZeroShotHead& head, const Dataset& data,
                                const RobustEvalOptions& opts);

/// Position-wise agreement with the reference, divided by the longer length.
double token_accuracy(std::span<const int> predicted, std::span<const int> reference);

struct CaptionEval {
  std::vector<std::size_t> indices;
  double clean_token_accuracy = 0.0;
  double adv_token_accuracy = 0.0;
  double degradation() const { return clean_token_accuracy - adv_token_accuracy; }
};

struct CaptionEvalOptions {
  double eps = 8.0 / 255.0;
  std::size_t steps = 20;
  std::size_t samples = 64;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
};

/// Untargeted APGD on the instruction loss of the canonical answer; token
/// accuracy of greedy answers on clean and attacked images.
CaptionEval eval_caption_robustness(const Captioner& cap, const VisionEncoder& vision, const Dataset& data,
                                    const CaptionEvalOptions& opts);

std::vector<std::string> default_targets();

struct TargetEval {
  std::string target;
  std::vector<std::size_t> indices;
  std::size_t successes = 0;
  double asr = 0.0;
  double token_accuracy = 0.0;  // adversarial answers against the canonical answers
};

struct TargetedEvalOptions {
  double eps = 16.0 / 255.0;
  std::size_t steps = 60;
  std::size_t samples_per_target = 10;
  std::uint64_t seed = 0;
};

/// Targeted APGD per target string on validation samples whose canonical
/// answer does not already contain the target.
std::vector<TargetEval> eval_targeted_asr(const Captioner& cap, const VisionEncoder& vision, const Dataset& data,
                                          const std::vector<std::string>& targets, const TargetedEvalOptions& opts);

double mean_asr(const std::vector<TargetEval>& results);

// ---------------------------------------------------------------------------
// Reports

/// One headline number; the flat CSV has exactly these columns.
struct MetricRow {
  std::string metric;
  std::string attack;
  double epsilon = 0.0;
  std::size_t steps = 0;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string detail;  // class or target string, empty for aggregates

  bool operator==(const MetricRow&) const = default;
};

struct EvalReport {
  std::string model;
  std::size_t samples = 0;
  std::vector<std::uint64_t> seeds;
  double wall_clock_seconds = 0.0;
  std::vector<MetricRow> rows;

  void add_robust(const RobustEval& r, const RobustEvalOptions& opts, bool with_clean);
  void add_caption(const CaptionEval& r, const CaptionEvalOptions& opts, bool with_clean);
  void add_targeted(const std::vector<TargetEval>& r, const TargetedEvalOptions& opts);

  /// Rows with the given metric name, in insertion order.
  std::vector<MetricRow> find(const std::string& metric) const;
  /// Every rate lies in [0, 1]; throws EvalError otherwise.
  void validate() const;
};

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
/// Header metric,attack,epsilon,steps,value,seed then one line per aggregate
/// row. Per-class and per-target rows live only in the JSON.
std::string report_to_csv(const EvalReport& r);

void save_report(const std::filesystem::path& path, const EvalReport& r);
EvalReport load_report(const std::filesystem::path& path);

/// Shortest round-trip decimal form.
std::string format_number(double v);

}  // namespace dvd
