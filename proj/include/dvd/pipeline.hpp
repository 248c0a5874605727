#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "dvd/config.hpp"
#include "dvd/eval.hpp"
#include "dvd/training.hpp"

namespace dvd {

enum class ClipVariant { Clean, Adversarial };
/// LLaVA-toy: clean vision, clean tuning. Delta: robust vision, clean
/// tuning. Delta2: robust vision, adversarial tuning. CrashProbe: clean
/// vision, adversarial tuning.
enum class CaptionVariant { Llava, Delta, Delta2, CrashProbe };

std::string variant_name(ClipVariant v);
std::string variant_name(CaptionVariant v);
ClipVariant parse_clip_variant(const std::string& s);
CaptionVariant parse_caption_variant(const std::string& s);

/// Receives (tag, metric, value) for every training step and eval number.
using MetricSink = std::function<void(const std::string& tag, const std::string& metric, double value)>;

/// Resolution the last training stage runs at; every evaluation uses it.
std::size_t final_resolution(const RunConfig& c);
std::vector<TrainStageConfig> clip_stages(const RunConfig& c, ClipVariant v);
Dataset eval_dataset(const RunConfig& c);

/// Clean: fresh encoders and head on the clean schedule, text frozen
/// afterwards. Adversarial: fresh vision encoder and head, text encoder and
/// temperature copied from `clean` and frozen, staged adversarial schedule.
ClipModel train_clip_variant(const RunConfig& c, ClipVariant v, const ClipModel* clean, const MetricSink& sink = {});

InstructionTuneConfig captioner_config(const RunConfig& c, CaptionVariant v);
CaptionModel train_caption_variant(const RunConfig& c, CaptionVariant v, const VisionEncoder& clean_vision,
                                   const VisionEncoder& robust_vision, const MetricSink& sink = {});

/// Zero-shot clean and robust accuracy at every configured radius.
EvalReport evaluate_clip(const RunConfig& c, const DualEncoder& model, const std::string& name, const Dataset& data);
/// Untargeted caption robustness and targeted ASR at every configured radius.
EvalReport evaluate_captioner(const RunConfig& c, const CaptionModel& model, const std::string& name,
                              const Dataset& data);

ClipModel load_clip_model(const RunConfig& c, const std::filesystem::path& path);
CaptionModel load_caption_model(const RunConfig& c, const std::filesystem::path& path);

/// config.resolved, checkpoints/, metrics.jsonl, reports/ under one root.
class RunDirectory {
 public:
  /// Creates the layout. An existing config.resolved must match `c`.
  RunDirectory(std::filesystem::path root, const RunConfig& c);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path checkpoint(const std::string& name) const;
  std::filesystem::path report(const std::string& name, const std::string& ext) const;

  /// Appends one JSON object per call to metrics.jsonl.
  void append_metric(const std::string& tag, const std::string& metric, double value) const;
  MetricSink sink() const;

 private:
  std::filesystem::path root_;
  std::string run_id_;
};

/// Larger malloc thresholds; the autodiff graph allocates many short-lived
/// buffers and the default policy returns them to the kernel each time.
void tune_allocator();

}  // namespace dvd
