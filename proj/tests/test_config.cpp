#include <gtest/gtest.h>

#include "dvd/config.hpp"
#include "dvd/pipeline.hpp"

using namespace dvd;

TEST(Config, EmptyTextGivesDefaults) {
  const auto c = parse_config("");
  EXPECT_EQ(c.data.size, 1600u);
  EXPECT_EQ(c.model.width, 64u);
  EXPECT_EQ(c.clip.patch_transfer, PatchTransfer::Resample);
  EXPECT_EQ(c.eval.zero_shot_eps, (std::vector<double>{0.0, 4.0 / 255.0}));
  EXPECT_TRUE(c.eval.targets.empty());
}

TEST(Config, ParsesEveryValueKind) {
  const auto c = parse_config(
      "# comment\n"
      "[run]\nseed = 9\n"
      "[data]\ncontrast = 0.3\n"
      "[clip]\nlr = 5e-4\nmix_clean = true\npatch_transfer = reinit\n"
      "[captioner]\neps = 4/255\n"
      "[eval]\ntargeted_eps = 2/255, 16/255\ntargets = a red circle;a green square\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.data.contrast, 0.3);
  EXPECT_EQ(c.clip.lr, 5e-4);
  EXPECT_TRUE(c.clip.mix_clean);
  EXPECT_EQ(c.clip.patch_transfer, PatchTransfer::Reinit);
  EXPECT_EQ(c.captioner.eps, 4.0 / 255.0);
  EXPECT_EQ(c.eval.targeted_eps, (std::vector<double>{2.0 / 255.0, 16.0 / 255.0}));
  EXPECT_EQ(c.eval.targets, (std::vector<std::string>{"a red circle", "a green square"}));
}

TEST(Config, StrictSchema) {
  EXPECT_THROW(parse_config("[data]\nsizes = 10\n"), ConfigError);
  EXPECT_THROW(parse_config("[dataset]\nsize = 10\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nsize = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nsize = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\ncontrast = 0.9\n"), ConfigError);
  EXPECT_THROW(parse_config("[clip]\nmix_clean = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("[clip]\npatch_transfer = copy\n"), ConfigError);
  EXPECT_THROW(parse_config("[clip]\nadversarial_sample_ratio = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nseed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nwidth = 30\nheads = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\ntargets = a purple circle\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nzero_shot_eps = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("[eval]\ncaption_eps = 1/0\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nsize = 160\n[eval]\ncaption_samples = 16\nzero_shot_samples = 17\n"), ConfigError);
}

TEST(Config, ResolvedConfigRoundTrips) {
  const auto c = parse_config("[run]\nseed = 4\n[clip]\nlr = 1/3\n[eval]\ncaption_eps = 0, 1/255\ntargets = a red circle;a blue cross\n");
  const auto text = resolved_config(c);
  EXPECT_NE(text.find("[run]\nseed = 4\n"), std::string::npos);
  const auto back = parse_config(text);
  EXPECT_EQ(back.clip.lr, 1.0 / 3.0);
  EXPECT_EQ(back.eval.caption_eps, c.eval.caption_eps);
  EXPECT_EQ(back.eval.targets, c.eval.targets);
  EXPECT_EQ(resolved_config(back), text);
}

TEST(Config, ResolvedDefaultsListEveryKey) {
  const auto text = resolved_config(RunConfig{});
  for (const char* key : {"first_stage_samples", "vision_lr_ratio", "zero_shot_steps", "targeted_samples",
                          "max_logit_scale", "noise_sigma"}) {
    EXPECT_NE(text.find(std::string(key) + " = "), std::string::npos) << key;
  }
  EXPECT_EQ(resolved_config(parse_config(text)), text);
  EXPECT_TRUE(parse_config(text).eval.targets.empty());
}

TEST(ParseFraction, AcceptsRatiosAndDecimals) {
  EXPECT_EQ(parse_fraction("8/255"), 8.0 / 255.0);
  EXPECT_EQ(parse_fraction("0.125"), 0.125);
  EXPECT_THROW(parse_fraction("8/"), ConfigError);
  EXPECT_THROW(parse_fraction(""), ConfigError);
}

TEST(Config, AdversarialScheduleScalesEveryStage) {
  const auto c = parse_config("[clip]\nfirst_stage_samples = 4000\nadversarial_sample_ratio = 3/2\n");
  const auto clean = clip_stages(c, ClipVariant::Clean);
  const auto adv = clip_stages(c, ClipVariant::Adversarial);
  ASSERT_EQ(clean.size(), adv.size());
  const std::size_t want_clean[] = {4000, 400, 100};
  const std::size_t want_adv[] = {6000, 600, 150};
  for (std::size_t i = 0; i < clean.size(); ++i) {
    EXPECT_EQ(clean[i].samples, want_clean[i]);
    EXPECT_EQ(adv[i].samples, want_adv[i]);
    EXPECT_EQ(clean[i].resolution, adv[i].resolution);
    EXPECT_EQ(clean[i].eps, 0.0);
    EXPECT_GT(adv[i].eps, 0.0);
  }
}
