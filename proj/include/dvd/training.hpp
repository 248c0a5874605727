#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/attacks.hpp"
#include "dvd/data.hpp"
#include "dvd/models.hpp"
#include "dvd/optim.hpp"

namespace dvd {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainStageConfig {
  std::size_t resolution = 32;
  std::size_t attack_steps = 0;
  double eps = 0.0;
  std::size_t samples = 0;  // samples to see in this stage
  std::size_t batch_size = 32;
  double lr = 3e-4;
  bool freeze_text = false;
  double lambda = 0.5;  // captioning loss weight
};

enum class PatchTransfer { Reinit, Resample };

struct ClipTrainOptions {
  std::vector<TrainStageConfig> stages;
  double weight_decay = 1e-4;
  bool mix_clean = false;               // average clean and adversarial losses
  bool attack_contrastive_only = false; // inner attack ignores the captioning term
  bool vision_only = false;             // keep temperature and captioning head fixed
  PatchTransfer patch_transfer = PatchTransfer::Reinit;  // on a resolution change
  std::size_t dataset_size = 1600;
  std::uint64_t data_seed = 0;
  RenderStyle style;
};

/// Dual encoder plus the auxiliary captioning head trained alongside it.
struct ClipModel {
  DualEncoder encoder;
  Captioner head;
};

ClipModel init_clip_model(const ModelConfig& cfg, std::size_t resolution, std::uint64_t seed);
ParamList params_of(const ClipModel& m);

struct ClipStepMetrics {
  std::size_t stage = 0;
  std::size_t step = 0;  // global step index
  double lr = 0.0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  double contrastive = 0.0;
  double captioning = 0.0;
  double match_accuracy = 0.0;
  double delta_max = 0.0;
  std::size_t domain_violations = 0;
  bool clean_step = false;  // eps = 0: no attack was run
};

/// Trainable tensors for one optimizer.
struct ParamGroup {
  ParamList params;
  OptimizerState state;
};

/// One outer step of adversarial contrastive training: PGD on the images
/// against contrastive + lambda * captioning loss, then an optimizer step on
/// every trainable tensor at the perturbed point. Text embeddings are
/// computed without a graph when the text encoder is frozen.
ClipStepMetrics adv_clip_step(ClipModel& model, ParamGroup& group, const Tensor& images, std::span<const int> captions,
                              std::size_t seq_len, const PerturbationBudget& budget, double lambda, Rng& rng,
                              const ClipTrainOptions& opts = {});

using ClipStepCallback = std::function<void(const ClipStepMetrics&)>;

/// Runs the stages in order on datasets rendered at each stage's
/// resolution. The patch embedding is re-initialized whenever the
/// resolution changes. Each stage gets a fresh optimizer and a cosine
/// learning-rate decay. Throws TrainingError on a non-finite loss; records
/// passed to `on_step` up to that point form the partial history.
std::vector<ClipStepMetrics> train_clip_staged(ClipModel& model, const ClipTrainOptions& opts, std::uint64_t seed,
                                               const ClipStepCallback& on_step = {});

/// Clean training of both encoders on the same schedule; afterwards every
/// text-encoder tensor is frozen.
std::vector<ClipStepMetrics> pretrain_text_encoder(ClipModel& model, ClipTrainOptions opts, std::uint64_t seed,
                                                   const ClipStepCallback& on_step = {});

/// Default desk-scale schedule: (16px, PGD-2, 4/255), (32px, PGD-3, 4/255),
/// (32px, PGD-4, 8/255) with sample counts in the ratio 10 : 1 : 0.25.
std::vector<TrainStageConfig> default_stages(std::size_t first_stage_samples, bool adversarial);

// ---------------------------------------------------------------------------

struct InstructionTuneConfig {
  std::size_t attack_steps = 5;
  double eps = 8.0 / 255.0;
  std::size_t epochs = 4;
  double lr = 1e-3;
  double vision_lr_ratio = 1.0 / 20.0;
  bool adversarial = false;
  std::size_t batch_size = 32;
  double weight_decay = 1e-4;
};

/// A captioner together with the vision encoder it reads.
struct CaptionModel {
  VisionEncoder vision;
  Captioner cap;
};

ParamList params_of(const CaptionModel& m);

struct InstructionStepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double clean_loss = 0.0;
  double adv_loss = 0.0;
  double delta_max = 0.0;
  std::size_t domain_violations = 0;
  bool clean_step = false;
};

/// One outer step of adversarial instruction tuning: PGD maximizing the
/// instruction loss over pixels, then a step on the decoder at the base
/// rate and on the vision encoder at ratio * base rate (skipped at ratio 0).
InstructionStepMetrics adv_instruction_step(CaptionModel& model, ParamGroup& decoder, ParamGroup* vision,
                                            const InstructionBatch& batch, const PerturbationBudget& budget,
                                            Rng& rng);

/// Canonical answer used for instruction tuning: the first caption template
/// followed by EOS.
TokenSeq canonical_answer(const SceneSpec& spec);

using InstructionStepCallback = std::function<void(const InstructionStepMetrics&)>;

/// Trains a fresh captioner on top of a copy of `vision` over the training
/// split of `data`.
CaptionModel train_captioner(const InstructionTuneConfig& config, const VisionEncoder& vision, const ModelConfig& cfg,
                             const Dataset& data, std::uint64_t seed, std::vector<InstructionStepMetrics>* history,
                             const InstructionStepCallback& on_step = {});

/// Deep copy of a vision encoder with gradients disabled.
VisionEncoder copy_vision(const VisionEncoder& v, const ModelConfig& cfg);

double cosine_lr(double base, std::size_t step, std::size_t total);

}  // namespace dvd
