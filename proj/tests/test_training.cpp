#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dvd/checkpoint.hpp"
#include "dvd/losses.hpp"
#include "dvd/ops.hpp"
#include "dvd/training.hpp"

using namespace dvd;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.width = 16;
  c.heads = 2;
  c.depth = 1;
  c.embed_dim = 8;
  return c;
}

struct Fixture {
  ModelConfig cfg = small_config();
  Dataset data = make_dataset(64, 16, 3);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  Tensor images = data.image_batch(idx);
  std::size_t len = 0;
  std::vector<int> caps = data.caption_batch(idx, &len);

  ClipModel model(bool freeze_text) const {
    auto m = init_clip_model(cfg, 16, 21);
    set_requires_grad(params_of(m), true);
    if (freeze_text) set_requires_grad(params_of(m.encoder.text), false);
    return m;
  }
};

PerturbationBudget budget(double eps, std::size_t steps, Init init, bool track_best) {
  PerturbationBudget b;
  b.eps = eps;
  b.steps = steps;
  b.init = init;
  b.track_best = track_best;
  return b;
}

ClipTrainOptions tiny_options(std::size_t res0, std::size_t res1) {
  ClipTrainOptions o;
  o.dataset_size = 64;
  o.data_seed = 5;
  TrainStageConfig a;
  a.resolution = res0;
  a.samples = 20;
  a.batch_size = 8;
  a.attack_steps = 1;
  a.eps = 4.0 / 255.0;
  a.freeze_text = true;
  TrainStageConfig b = a;
  b.resolution = res1;
  b.samples = 9;
  b.attack_steps = 2;
  o.stages = {a, b};
  return o;
}

}  // namespace

TEST(ClipStep, ZeroBudgetMatchesHandWrittenCleanStep) {
  Fixture f;
  auto a = f.model(false);
  auto b = f.model(false);
  ParamGroup ga{trainable(params_of(a)), OptimizerState::adamw(1e-2, 1e-4)};
  Rng rng(9);
  const auto before = rng;
  auto m = adv_clip_step(a, ga, f.images, f.caps, f.len, budget(0.0, 3, Init::RandomUniform, false), 0.5, rng);
  EXPECT_TRUE(m.clean_step);
  EXPECT_EQ(m.clean_loss, m.adv_loss);
  EXPECT_EQ(m.delta_max, 0.0);
  EXPECT_EQ(rng.next(), Rng(before).next());

  // Reference: contrastive + 0.5 * captioning from one vision pass, one
  // AdamW step, clamp.
  auto params = trainable(params_of(b));
  auto state = OptimizerState::adamw(1e-2, 1e-4);
  auto feats = vision_features(b.encoder.vision, b.encoder.config, f.images);
  auto img = l2_normalize(matmul(mean(feats, 1), b.encoder.vision.proj), 1);
  auto con = contrastive_loss(img, encode_text(b.encoder, f.caps, f.len), inverse_temperature(b.encoder));
  auto cb = caption_batch(f.images, f.caps, f.len);
  auto nll = mean(answer_nll(caption_logits_from_features(b.head, feats, cb.text, cb.seq_len), cb));
  auto total = add(con.value, scale(nll, 0.5));
  backward(total);
  optimizer_step(state, params);
  clamp_logit_scale(b.encoder);
  EXPECT_EQ(m.clean_loss, total.item());
  EXPECT_EQ(checksum(params_of(a)), checksum(params_of(b)));

  // The same step through the public two-pass losses agrees to rounding.
  auto c = f.model(false);
  auto c_params = trainable(params_of(c));
  auto c_state = OptimizerState::adamw(1e-2, 1e-4);
  auto c_con = contrastive_loss(encode_image(c.encoder, f.images), encode_text(c.encoder, f.caps, f.len),
                                inverse_temperature(c.encoder));
  auto c_cap = captioning_loss(c.head, c.encoder.vision, f.images, f.caps, f.len);
  backward(add(c_con.value, scale(c_cap.value, 0.5)));
  optimizer_step(c_state, c_params);
  clamp_logit_scale(c.encoder);
  auto pa = params_of(a);
  auto pc = params_of(c);
  ASSERT_EQ(pa.size(), pc.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i].value.data();
    auto vc = pc[i].value.data();
    for (std::size_t j = 0; j < va.size(); ++j) ASSERT_NEAR(va[j], vc[j], 1e-9) << pa[i].name;
  }
}

TEST(ClipStep, FrozenTextIsUntouched) {
  Fixture f;
  auto m = f.model(true);
  const auto text_before = checksum(params_of(m.encoder.text));
  const auto vision_before = checksum(params_of(m.encoder.vision));
  ParamGroup g{trainable(params_of(m)), OptimizerState::adamw(1e-2)};
  Rng rng(1);
  auto r = adv_clip_step(m, g, f.images, f.caps, f.len, budget(4.0 / 255.0, 2, Init::RandomUniform, false), 0.5, rng);
  EXPECT_FALSE(r.clean_step);
  EXPECT_LE(r.delta_max, 4.0 / 255.0 + 1e-12);
  EXPECT_EQ(r.domain_violations, 0u);
  EXPECT_EQ(checksum(params_of(m.encoder.text)), text_before);
  EXPECT_NE(checksum(params_of(m.encoder.vision)), vision_before);
}

TEST(ClipStep, BestTrackingProbeNeverBelowClean) {
  Fixture f;
  for (double eps : {1.0 / 255.0, 4.0 / 255.0, 16.0 / 255.0}) {
    auto m = f.model(true);
    ParamGroup g{trainable(params_of(m)), OptimizerState::adamw(1e-3)};
    Rng rng(2);
    auto r = adv_clip_step(m, g, f.images, f.caps, f.len, budget(eps, 3, Init::Zero, true), 0.5, rng);
    EXPECT_GE(r.adv_loss, r.clean_loss) << eps;
  }
}

TEST(ClipStep, MixCleanAveragesBothLosses) {
  Fixture f;
  auto m = f.model(true);
  ParamGroup g{trainable(params_of(m)), OptimizerState::adamw(1e-3)};
  Rng rng(2);
  ClipTrainOptions o;
  o.mix_clean = true;
  auto r = adv_clip_step(m, g, f.images, f.caps, f.len, budget(8.0 / 255.0, 2, Init::Zero, true), 0.5, rng, o);
  EXPECT_GT(r.adv_loss, r.clean_loss);
}

TEST(ClipStaged, HistoryCoversEveryStepAndStage) {
  Fixture f;
  auto m = init_clip_model(f.cfg, 16, 4);
  set_requires_grad(params_of(m), true);
  set_requires_grad(params_of(m.encoder.text), false);
  auto opts = tiny_options(16, 32);
  std::size_t seen = 0;
  auto h = train_clip_staged(m, opts, 17, [&](const ClipStepMetrics&) { ++seen; });
  ASSERT_EQ(h.size(), 3u + 2u);  // ceil(20/8) + ceil(9/8)
  EXPECT_EQ(seen, h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(h[i].step, i);
    EXPECT_EQ(h[i].stage, i < 3 ? 0u : 1u);
    EXPECT_LE(h[i].delta_max, 4.0 / 255.0 + 1e-12);
    EXPECT_EQ(h[i].domain_violations, 0u);
  }
  EXPECT_EQ(m.encoder.vision.resolution, 32u);
  EXPECT_DOUBLE_EQ(h[0].lr, opts.stages[0].lr);
  EXPECT_DOUBLE_EQ(h[3].lr, opts.stages[1].lr);  // fresh schedule per stage
}

TEST(ClipStaged, SeededRunsAreBitwiseEqual) {
  Fixture f;
  auto run = [&] {
    auto m = init_clip_model(f.cfg, 16, 4);
    set_requires_grad(params_of(m), true);
    set_requires_grad(params_of(m.encoder.text), false);
    auto h = train_clip_staged(m, tiny_options(16, 16), 17);
    return std::make_pair(h.back().adv_loss, checksum(params_of(m)));
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(ClipStaged, RejectsShrinkingResolution) {
  Fixture f;
  auto m = init_clip_model(f.cfg, 32, 4);
  EXPECT_THROW(train_clip_staged(m, tiny_options(32, 16), 1), std::invalid_argument);
}

TEST(ClipStaged, DivergenceReportsTheStep) {
  Fixture f;
  auto m = init_clip_model(f.cfg, 16, 4);
  set_requires_grad(params_of(m), true);
  auto opts = tiny_options(16, 16);
  for (auto& s : opts.stages) {
    s.lr = 1e305;
    s.eps = 0.0;
  }
  std::vector<ClipStepMetrics> partial;
  try {
    train_clip_staged(m, opts, 3, [&](const ClipStepMetrics& s) { partial.push_back(s); });
    FAIL() << "expected divergence";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), partial.size());
    EXPECT_GE(e.step(), 1u);
  }
}

TEST(ClipStaged, PretrainFreezesTextAndRunsClean) {
  Fixture f;
  auto m = init_clip_model(f.cfg, 16, 4);
  set_requires_grad(params_of(m), true);
  auto h = pretrain_text_encoder(m, tiny_options(16, 16), 8);
  for (const auto& s : h) EXPECT_TRUE(s.clean_step);
  for (const auto& p : params_of(m.encoder.text)) EXPECT_FALSE(p.value.requires_grad()) << p.name;
}

TEST(ClipStaged, DefaultScheduleShape) {
  auto s = default_stages(4000, true);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].resolution, 16u);
  EXPECT_EQ(s[1].resolution, 32u);
  EXPECT_EQ(s[2].resolution, 32u);
  EXPECT_EQ(s[0].attack_steps, 2u);
  EXPECT_EQ(s[1].attack_steps, 3u);
  EXPECT_EQ(s[2].attack_steps, 4u);
  EXPECT_DOUBLE_EQ(s[0].eps, 4.0 / 255.0);
  EXPECT_DOUBLE_EQ(s[1].eps, 4.0 / 255.0);
  EXPECT_DOUBLE_EQ(s[2].eps, 8.0 / 255.0);
  EXPECT_EQ(s[0].samples, 4000u);
  EXPECT_EQ(s[1].samples, 400u);
  EXPECT_EQ(s[2].samples, 100u);
  for (const auto& st : s) EXPECT_TRUE(st.freeze_text);
  for (const auto& st : default_stages(4000, false)) {
    EXPECT_EQ(st.eps, 0.0);
    EXPECT_FALSE(st.freeze_text);
  }
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(2.0, 0, 10), 2.0);
  EXPECT_NEAR(cosine_lr(2.0, 5, 10), 1.0, 1e-15);
  EXPECT_NEAR(cosine_lr(2.0, 10, 10), 0.0, 1e-15);
}

// ---------------------------------------------------------------------------

namespace {

struct CapFixture {
  ModelConfig cfg = small_config();
  Dataset data = make_dataset(64, 16, 3);
  InstructionBatch batch;

  CapFixture() {
    std::vector<std::size_t> idx{0, 1, 2, 3};
    std::vector<TokenSeq> answers;
    for (auto i : idx) answers.push_back(canonical_answer(data.specs[i]));
    batch = make_instruction_batch(data.image_batch(idx), describe_instruction(), answers);
  }

  CaptionModel model() const {
    Rng rng(6);
    CaptionModel m{init_vision(cfg, 16, rng), init_captioner(cfg, 8)};
    set_requires_grad(params_of(m), true);
    return m;
  }
};

}  // namespace

TEST(InstructionStep, ZeroBudgetMatchesHandWrittenCleanStep) {
  CapFixture f;
  auto a = f.model();
  auto b = f.model();
  ParamGroup dec{params_of(a.cap), OptimizerState::adamw(1e-2)};
  ParamGroup vis{params_of(a.vision), OptimizerState::adamw(5e-4)};
  Rng rng(3);
  auto m = adv_instruction_step(a, dec, &vis, f.batch, budget(0.0, 4, Init::RandomUniform, false), rng);
  EXPECT_TRUE(m.clean_step);

  auto ref_dec = OptimizerState::adamw(1e-2);
  auto ref_vis = OptimizerState::adamw(5e-4);
  auto loss = instruction_loss(b.cap, b.vision, f.batch);
  backward(loss.value);
  optimizer_step(ref_dec, params_of(b.cap));
  optimizer_step(ref_vis, params_of(b.vision));
  EXPECT_EQ(m.adv_loss, loss.item());
  EXPECT_EQ(checksum(params_of(a)), checksum(params_of(b)));
}

TEST(InstructionStep, NoVisionGroupLeavesVisionUnchanged) {
  CapFixture f;
  auto m = f.model();
  set_requires_grad(params_of(m.vision), false);
  const auto vision_before = checksum(params_of(m.vision));
  const auto cap_before = checksum(params_of(m.cap));
  ParamGroup dec{params_of(m.cap), OptimizerState::adamw(1e-2)};
  Rng rng(3);
  adv_instruction_step(m, dec, nullptr, f.batch, budget(8.0 / 255.0, 2, Init::RandomUniform, false), rng);
  EXPECT_EQ(checksum(params_of(m.vision)), vision_before);
  EXPECT_NE(checksum(params_of(m.cap)), cap_before);
}

TEST(InstructionStep, BestTrackingProbeNeverBelowClean) {
  CapFixture f;
  auto m = f.model();
  ParamGroup dec{params_of(m.cap), OptimizerState::adamw(1e-3)};
  Rng rng(4);
  auto r = adv_instruction_step(m, dec, nullptr, f.batch, budget(8.0 / 255.0, 3, Init::Zero, true), rng);
  EXPECT_GE(r.adv_loss, r.clean_loss);
  EXPECT_LE(r.delta_max, 8.0 / 255.0 + 1e-12);
}

TEST(TrainCaptioner, RatioZeroKeepsVisionChecksum) {
  CapFixture f;
  Rng rng(6);
  auto vision = init_vision(f.cfg, 16, rng);
  const auto before = checksum(params_of(vision));
  InstructionTuneConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  c.vision_lr_ratio = 0.0;
  c.adversarial = true;
  c.attack_steps = 1;
  std::vector<InstructionStepMetrics> h;
  auto m = train_captioner(c, vision, f.cfg, f.data, 5, &h);
  EXPECT_EQ(checksum(params_of(m.vision)), before);
  EXPECT_EQ(checksum(params_of(vision)), before);
  const std::size_t train = f.data.indices(Split::Train).size();
  EXPECT_EQ(h.size(), (train + 15) / 16);
}

TEST(TrainCaptioner, VisionMovesWithPositiveRatioAndSourceIsUntouched) {
  CapFixture f;
  Rng rng(6);
  auto vision = init_vision(f.cfg, 16, rng);
  const auto before = checksum(params_of(vision));
  InstructionTuneConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  auto m = train_captioner(c, vision, f.cfg, f.data, 5, nullptr);
  EXPECT_NE(checksum(params_of(m.vision)), before);
  EXPECT_EQ(checksum(params_of(vision)), before);
  for (const auto& p : params_of(m)) EXPECT_FALSE(p.value.requires_grad()) << p.name;
}

TEST(TrainCaptioner, SeededRunsAreBitwiseEqual) {
  CapFixture f;
  Rng rng(6);
  auto vision = init_vision(f.cfg, 16, rng);
  InstructionTuneConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  c.adversarial = true;
  c.attack_steps = 2;
  std::vector<InstructionStepMetrics> h1, h2;
  auto a = train_captioner(c, vision, f.cfg, f.data, 5, &h1);
  auto b = train_captioner(c, vision, f.cfg, f.data, 5, &h2);
  ASSERT_EQ(h1.size(), h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    EXPECT_EQ(h1[i].adv_loss, h2[i].adv_loss);
    EXPECT_EQ(h1[i].clean_loss, h2[i].clean_loss);
  }
  EXPECT_EQ(checksum(params_of(a)), checksum(params_of(b)));
}

TEST(TrainCaptioner, CanonicalAnswerUsesFirstTemplate) {
  SceneSpec s{ShapeKind::Cross, Color::Blue, Position::BottomRight, 0.4, 1};
  EXPECT_EQ(detokenize(canonical_answer(s)), "a blue cross in the bottom right");
  EXPECT_EQ(canonical_answer(s).back(), kEos);
}
