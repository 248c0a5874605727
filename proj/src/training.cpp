#include "dvd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dvd/checkpoint.hpp"
#include "dvd/losses.hpp"
#include "dvd/ops.hpp"

namespace dvd {

namespace {

struct ClipLoss {
  Tensor total;
  double contrastive = 0.0;
  double captioning = 0.0;
  double match_accuracy = 0.0;
};

// Contrastive plus weighted captioning loss from one shared vision pass.
ClipLoss clip_loss(const ClipModel& m, const Tensor& images, const Tensor& txt_emb, const InstructionBatch& cap_batch,
                   double lambda) {
  const auto& enc = m.encoder;
  auto f = vision_features(enc.vision, enc.config, images);
  auto img = l2_normalize(matmul(mean(f, 1), enc.vision.proj), 1);
  auto con = contrastive_loss(img, txt_emb, inverse_temperature(enc));
  ClipLoss out{con.value, con.value.item(), 0.0, con.diag.match_accuracy};
  if (lambda > 0.0) {
    auto nll = mean(answer_nll(caption_logits_from_features(m.head, f, cap_batch.text, cap_batch.seq_len), cap_batch));
    out.captioning = nll.item();
    out.total = add(out.total, scale(nll, lambda));
  }
  return out;
}

Tensor plus(const Tensor& x, const Tensor& delta) {
  auto xv = x.data();
  auto dv = delta.data();
  std::vector<double> out(xv.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = xv[j] + dv[j];
  return Tensor(x.shape(), std::move(out));
}

void step_group(ParamGroup& g) {
  optimizer_step(g.state, g.params);
  zero_grads(g.params);
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Cycles through a reshuffled index list, one batch at a time.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> pool, std::size_t batch, Rng& rng) : pool_(std::move(pool)), batch_(batch), rng_(rng) {
    if (pool_.empty()) throw std::invalid_argument("training: empty training split");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        order_ = shuffled(pool_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t batch_;
  Rng& rng_;
};

}  // namespace

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

ClipModel init_clip_model(const ModelConfig& cfg, std::size_t resolution, std::uint64_t seed) {
  return {init_dual_encoder(cfg, resolution, seed), init_captioner(cfg, Rng::derive(seed, 4))};
}

ParamList params_of(const ClipModel& m) {
  auto out = params_of(m.encoder);
  auto head = params_of(m.head, "head");
  out.insert(out.end(), head.begin(), head.end());
  return out;
}

ClipStepMetrics adv_clip_step(ClipModel& model, ParamGroup& group, const Tensor& images, std::span<const int> captions,
                              std::size_t seq_len, const PerturbationBudget& budget, double lambda, Rng& rng,
                              const ClipTrainOptions& opts) {
  auto& enc = model.encoder;
  const bool text_frozen = !enc.text.token.requires_grad();
  const auto cap_batch = caption_batch(images, captions, seq_len);
  Tensor txt_const;
  if (text_frozen) {
    NoGradGuard guard;
    txt_const = encode_text(enc, captions, seq_len);
  }
  auto text_emb = [&] { return text_frozen ? txt_const : encode_text(enc, captions, seq_len); };

  ClipStepMetrics m;
  m.clean_step = budget.eps == 0.0;
  Tensor x_adv = images;
  if (!m.clean_step) {
    const double attack_lambda = opts.attack_contrastive_only ? 0.0 : lambda;
    Tensor flat(Shape{1, images.numel()}, std::vector<double>(images.data().begin(), images.data().end()));
    auto objective = make_objective([&](const Tensor& xa) -> Tensor {
      Tensor txt;
      {
        NoGradGuard guard;
        txt = text_emb();
      }
      return clip_loss(model, reshape(xa, images.shape()), txt, cap_batch, attack_lambda).total;
    });
    auto r = pgd(objective, flat, budget, &rng);
    m.delta_max = r.max_norm;
    m.domain_violations = r.domain_violations;
    x_adv = plus(images, reshape(r.delta, images.shape()).detach());
  }

  auto adv = clip_loss(model, x_adv, text_emb(), cap_batch, lambda);
  Tensor objective = adv.total;
  m.adv_loss = adv.total.item();
  if (m.clean_step) {
    m.clean_loss = m.adv_loss;
  } else if (opts.mix_clean) {
    auto clean = clip_loss(model, images, text_emb(), cap_batch, lambda);
    m.clean_loss = clean.total.item();
    objective = scale(add(adv.total, clean.total), 0.5);
  } else {
    NoGradGuard guard;
    m.clean_loss = clip_loss(model, images, text_emb(), cap_batch, lambda).total.item();
  }
  m.contrastive = adv.contrastive;
  m.captioning = adv.captioning;
  m.match_accuracy = adv.match_accuracy;
  m.lr = group.state.lr;

  backward(objective);
  step_group(group);
  clamp_logit_scale(enc);
  return m;
}

std::vector<ClipStepMetrics> train_clip_staged(ClipModel& model, const ClipTrainOptions& opts, std::uint64_t seed,
                                               const ClipStepCallback& on_step) {
  if (opts.stages.empty()) throw std::invalid_argument("train_clip_staged: no stages");
  for (std::size_t s = 1; s < opts.stages.size(); ++s) {
    if (opts.stages[s].resolution < opts.stages[s - 1].resolution) {
      throw std::invalid_argument("train_clip_staged: stage resolutions must be nondecreasing");
    }
  }
  Rng rng(Rng::derive(seed, 11));
  Rng init_rng(Rng::derive(seed, 12));
  std::vector<ClipStepMetrics> history;
  Dataset data;
  auto& enc = model.encoder;

  for (std::size_t s = 0; s < opts.stages.size(); ++s) {
    const auto& st = opts.stages[s];
    if (st.batch_size == 0) throw std::invalid_argument("train_clip_staged: batch size must be positive");
    if (!data.images.defined() || data.resolution() != static_cast<int>(st.resolution)) {
      data = make_dataset(opts.dataset_size, static_cast<int>(st.resolution), opts.data_seed, opts.style);
    }
    if (enc.vision.resolution != st.resolution) {
      if (opts.patch_transfer == PatchTransfer::Resample) {
        resample_patch_embedding(enc.vision, enc.config, st.resolution);
      } else {
        reinit_patch_embedding(enc.vision, enc.config, st.resolution, init_rng);
      }
    }

    set_requires_grad(params_of(enc.vision), true);
    set_requires_grad(params_of(enc.text), !st.freeze_text);
    set_requires_grad({{"logit_scale", enc.logit_scale}}, !opts.vision_only);
    set_requires_grad(params_of(model.head, "head"), !opts.vision_only && st.lambda > 0.0);
    ParamGroup group{trainable(params_of(model)), OptimizerState::adamw(st.lr, opts.weight_decay)};

    PerturbationBudget budget;
    budget.eps = st.eps;
    budget.steps = st.attack_steps;
    budget.init = Init::RandomUniform;
    budget.track_best = false;

    const std::size_t steps = (st.samples + st.batch_size - 1) / st.batch_size;
    BatchSampler sampler(data.indices(Split::Train), st.batch_size, rng);
    for (std::size_t t = 0; t < steps; ++t) {
      auto idx = sampler.next();
      std::size_t len = 0;
      auto caps = data.caption_batch(idx, &len);
      group.state.lr = cosine_lr(st.lr, t, steps);
      ClipStepMetrics m;
      try {
        m = adv_clip_step(model, group, data.image_batch(idx), caps, len, budget, st.lambda, rng, opts);
      } catch (const NonFiniteError& e) {
        throw TrainingError("train_clip_staged: diverged at step " + std::to_string(history.size()) + ": " + e.what(),
                            history.size());
      }
      m.stage = s;
      m.step = history.size();
      history.push_back(m);
      if (on_step) on_step(m);
    }
  }
  return history;
}

std::vector<ClipStepMetrics> pretrain_text_encoder(ClipModel& model, ClipTrainOptions opts, std::uint64_t seed,
                                                   const ClipStepCallback& on_step) {
  for (auto& st : opts.stages) {
    st.eps = 0.0;
    st.attack_steps = 0;
    st.freeze_text = false;
  }
  auto history = train_clip_staged(model, opts, seed, on_step);
  set_requires_grad(params_of(model.encoder.text), false);
  return history;
}

std::vector<TrainStageConfig> default_stages(std::size_t first_stage_samples, bool adversarial) {
  const double n = static_cast<double>(first_stage_samples);
  std::vector<TrainStageConfig> stages(3);
  stages[0].resolution = 16;
  stages[0].attack_steps = 2;
  stages[0].eps = 4.0 / 255.0;
  stages[0].samples = first_stage_samples;
  stages[1].resolution = 32;
  stages[1].attack_steps = 3;
  stages[1].eps = 4.0 / 255.0;
  stages[1].samples = static_cast<std::size_t>(std::llround(n / 10.0));
  stages[2].resolution = 32;
  stages[2].attack_steps = 4;
  stages[2].eps = 8.0 / 255.0;
  stages[2].samples = static_cast<std::size_t>(std::llround(n / 40.0));
  for (auto& st : stages) {
    st.freeze_text = adversarial;
    if (!adversarial) {
      st.eps = 0.0;
      st.attack_steps = 0;
    }
  }
  return stages;
}

// ---------------------------------------------------------------------------

ParamList params_of(const CaptionModel& m) {
  auto out = params_of(m.vision);
  auto cap = params_of(m.cap);
  out.insert(out.end(), cap.begin(), cap.end());
  return out;
}

VisionEncoder copy_vision(const VisionEncoder& v, const ModelConfig& cfg) {
  Rng rng(0);
  auto out = init_vision(cfg, v.resolution, rng);
  assign_params(params_of(out), params_of(v));
  return out;
}

TokenSeq canonical_answer(const SceneSpec& spec) { return caption_of(spec, 0); }

InstructionStepMetrics adv_instruction_step(CaptionModel& model, ParamGroup& decoder, ParamGroup* vision,
                                            const InstructionBatch& batch, const PerturbationBudget& budget,
                                            Rng& rng) {
  InstructionStepMetrics m;
  m.clean_step = budget.eps == 0.0;
  InstructionBatch adv = batch;
  if (!m.clean_step) {
    auto objective = make_objective([&](const Tensor& xa) -> Tensor {
      auto b = batch;
      b.images = xa;
      return answer_nll(caption_logits(model.cap, model.vision, b), b);
    });
    auto r = pgd(objective, batch.images, budget, &rng);
    m.delta_max = r.max_norm;
    m.domain_violations = r.domain_violations;
    adv.images = plus(batch.images, r.delta);
  }
  auto loss = instruction_loss(model.cap, model.vision, adv);
  m.adv_loss = loss.item();
  if (m.clean_step) {
    m.clean_loss = m.adv_loss;
  } else {
    NoGradGuard guard;
    m.clean_loss = instruction_loss(model.cap, model.vision, batch).item();
  }
  m.lr = decoder.state.lr;
  backward(loss.value);
  step_group(decoder);
  if (vision) step_group(*vision);
  return m;
}

CaptionModel train_captioner(const InstructionTuneConfig& config, const VisionEncoder& vision, const ModelConfig& cfg,
                             const Dataset& data, std::uint64_t seed, std::vector<InstructionStepMetrics>* history,
                             const InstructionStepCallback& on_step) {
  if (config.batch_size == 0) throw std::invalid_argument("train_captioner: batch size must be positive");
  if (data.resolution() != static_cast<int>(vision.resolution)) {
    throw std::invalid_argument("train_captioner: dataset resolution does not match the vision encoder");
  }
  CaptionModel m{copy_vision(vision, cfg), init_captioner(cfg, seed)};
  set_requires_grad(params_of(m.cap), true);
  ParamGroup decoder{params_of(m.cap), OptimizerState::adamw(config.lr, config.weight_decay)};
  ParamGroup vis;
  const bool train_vision = config.vision_lr_ratio > 0.0;
  if (train_vision) {
    set_requires_grad(params_of(m.vision), true);
    vis = {params_of(m.vision), OptimizerState::adamw(config.lr * config.vision_lr_ratio, config.weight_decay)};
  }

  PerturbationBudget budget;
  budget.eps = config.adversarial ? config.eps : 0.0;
  budget.steps = config.attack_steps;
  budget.init = Init::RandomUniform;
  budget.track_best = false;

  Rng rng(Rng::derive(seed, 21));
  auto pool = data.indices(Split::Train);
  const std::size_t per_epoch = (pool.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  BatchSampler sampler(pool, config.batch_size, rng);
  for (std::size_t t = 0; t < total; ++t) {
    auto idx = sampler.next();
    std::vector<TokenSeq> answers;
    for (auto i : idx) answers.push_back(canonical_answer(data.specs[i]));
    auto batch = make_instruction_batch(data.image_batch(idx), describe_instruction(), answers);
    decoder.state.lr = cosine_lr(config.lr, t, total);
    if (train_vision) vis.state.lr = cosine_lr(config.lr * config.vision_lr_ratio, t, total);
    InstructionStepMetrics s;
    try {
      s = adv_instruction_step(m, decoder, train_vision ? &vis : nullptr, batch, budget, rng);
    } catch (const NonFiniteError& e) {
      throw TrainingError("train_captioner: diverged at step " + std::to_string(t) + ": " + e.what(), t);
    }
    s.step = t;
    if (history) history->push_back(s);
    if (on_step) on_step(s);
  }
  set_requires_grad(params_of(m.vision), false);
  set_requires_grad(params_of(m.cap), false);
  return m;
}

}  // namespace dvd
