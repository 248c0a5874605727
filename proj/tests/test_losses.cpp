#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dvd/gradcheck.hpp"
#include "dvd/losses.hpp"
#include "dvd/ops.hpp"
#include "support.hpp"

using namespace dvd;
using dvd::testing::random_tensor;

namespace {

Tensor unit_rows(Rng& rng, std::size_t b, std::size_t d) {
  auto x = random_tensor(rng, {b, d});
  return l2_normalize(x, 1).detach();
}

// Brute-force symmetric contrastive loss straight from the definition.
double contrastive_oracle(const Tensor& img, const Tensor& txt, double tau) {
  const std::size_t b = img.size(0), d = img.size(1);
  std::vector<double> s(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < d; ++k) c += img[i * d + k] * txt[j * d + k];
      s[i * b + j] = c / tau;
    }
  double i2t = 0.0, t2i = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
      row += std::exp(s[i * b + k]);
      col += std::exp(s[k * b + i]);
    }
    i2t += -std::log(std::exp(s[i * b + i]) / row);
    t2i += -std::log(std::exp(s[i * b + i]) / col);
  }
  return 0.5 * (i2t + t2i) / static_cast<double>(b);
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t w = x.numel() / x.size(0);
  std::vector<double> out;
  for (auto i : order) out.insert(out.end(), x.data().begin() + i * w, x.data().begin() + (i + 1) * w);
  return Tensor(x.shape(), out);
}

struct CaptionFixture {
  Dataset data = make_dataset(16, 16, 3);
  VisionEncoder vision = init_dual_encoder(ModelConfig{}, 16, 5).vision;
  Captioner cap = init_captioner(ModelConfig{}, 6);

  InstructionBatch batch(std::vector<std::size_t> idx, const TokenSeq& inst) const {
    std::vector<TokenSeq> answers;
    for (auto i : idx) answers.push_back(caption_of(data.specs[i]));
    return make_instruction_batch(data.image_batch(idx), inst, answers);
  }

  Captioner uniform() const {
    Captioner c = cap;
    c.head.w = Tensor(cap.head.w.shape(), 0.0);
    c.head.b = Tensor(cap.head.b.shape(), 0.0);
    return c;
  }
};

}  // namespace

TEST(Contrastive, SingleElementBatchIsZero) {
  Rng rng(1);
  auto e = unit_rows(rng, 1, 8);
  EXPECT_EQ(contrastive_loss(e, unit_rows(rng, 1, 8), 0.07).item(), 0.0);
}

TEST(Contrastive, OrthogonalPairByHand) {
  Tensor e({2, 2}, {1, 0, 0, 1});
  EXPECT_NEAR(contrastive_loss(e, e, 1.0).item(), std::log(1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(contrastive_loss(e, e, 1.0).item(), 0.31326, 1e-5);
}

TEST(Contrastive, MatchesBruteForce) {
  Rng rng(2);
  for (std::size_t b = 1; b <= 4; ++b) {
    for (int trial = 0; trial < 10; ++trial) {
      auto img = unit_rows(rng, b, 6);
      auto txt = unit_rows(rng, b, 6);
      const double tau = rng.uniform(0.05, 2.0);
      EXPECT_NEAR(contrastive_loss(img, txt, tau).item(), contrastive_oracle(img, txt, tau), 1e-10);
    }
  }
}

TEST(Contrastive, JointPermutationInvariance) {
  Rng rng(3);
  auto img = unit_rows(rng, 4, 8);
  auto txt = unit_rows(rng, 4, 8);
  std::vector<std::size_t> order{2, 0, 3, 1};
  EXPECT_NEAR(contrastive_loss(img, txt, 0.1).item(),
              contrastive_loss(permute_rows(img, order), permute_rows(txt, order), 0.1).item(), 1e-12);
}

TEST(Contrastive, NonNegativeAndSaturates) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_GE(contrastive_loss(unit_rows(rng, 3, 5), unit_rows(rng, 3, 5), 0.5).item(), 0.0);
  }
  Tensor e({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_LT(contrastive_loss(e, e, 1.0 / 50.0).item(), 1e-9);
}

TEST(Contrastive, DoublingTemperatureHalvesLogits) {
  Rng rng(5);
  auto img = unit_rows(rng, 4, 6);
  auto txt = unit_rows(rng, 4, 6);
  EXPECT_EQ(contrastive_loss(img, txt, 2.0).item(), contrastive_loss(img, txt, Tensor::scalar(0.5)).item());
  EXPECT_NEAR(contrastive_loss(img, txt, 2.0).item(), contrastive_oracle(img, txt, 2.0), 1e-12);
}

TEST(Contrastive, Diagnostics) {
  Tensor e({2, 2}, {1, 0, 0, 1});
  auto l = contrastive_loss(e, e, 1.0);
  EXPECT_EQ(l.diag.match_accuracy, 1.0);
  EXPECT_NEAR(l.diag.image_to_text, l.diag.text_to_image, 1e-15);
  EXPECT_FALSE(Tensor::scalar(l.diag.image_to_text).requires_grad());
}

TEST(Contrastive, RejectsNonUnitRows) {
  Tensor bad({2, 2}, {1, 0, 0, 1.01});
  Tensor ok({2, 2}, {1, 0, 0, 1});
  EXPECT_THROW(contrastive_loss(bad, ok, 1.0), LossError);
}

TEST(CaptionLoss, UniformLogitsGiveLogVocab) {
  CaptionFixture f;
  auto c = f.uniform();
  std::size_t t = 0;
  auto caps = f.data.caption_batch(std::vector<std::size_t>{0, 1, 2}, &t);
  auto images = f.data.image_batch(std::vector<std::size_t>{0, 1, 2});
  EXPECT_NEAR(captioning_loss(c, f.vision, images, caps, t).item(), std::log(64.0), 1e-12);
  EXPECT_NEAR(instruction_loss(c, f.vision, f.batch({0, 4}, describe_instruction())).item(), std::log(64.0), 1e-12);
}

TEST(CaptionLoss, SaturatedLogitsGiveNearZero) {
  CaptionFixture f;
  auto b = f.batch({0, 1}, describe_instruction());
  std::vector<double> z(b.batch() * b.seq_len * 64, 0.0);
  for (std::size_t i = 0; i < b.batch() * b.seq_len; ++i) z[i * 64 + static_cast<std::size_t>(b.text[i])] = 50.0;
  auto nll = answer_nll(Tensor({b.batch(), b.seq_len, 64}, z), b);
  EXPECT_LT(nll[0], 1e-9);
  EXPECT_LT(nll[1], 1e-9);
}

TEST(CaptionLoss, EqualsInstructionLossWithEmptyInstruction) {
  CaptionFixture f;
  std::size_t t = 0;
  std::vector<std::size_t> idx{2, 3};
  auto caps = f.data.caption_batch(idx, &t);
  auto images = f.data.image_batch(idx);
  auto a = captioning_loss(f.cap, f.vision, images, caps, t).item();
  auto b = instruction_loss(f.cap, f.vision, f.batch(idx, TokenSeq{})).item();
  EXPECT_EQ(a, b);
}

TEST(CaptionLoss, EmptyCaptionThrows) {
  CaptionFixture f;
  std::vector<int> caps{kEos, kPad};
  EXPECT_THROW(captioning_loss(f.cap, f.vision, f.data.image_batch(std::vector<std::size_t>{0}), caps, 2), LossError);
}

TEST(InstructionLoss, IgnoresInstructionPositionLabels) {
  CaptionFixture f;
  auto b = f.batch({0, 1}, describe_instruction());
  Rng rng(7);
  auto logits = random_tensor(rng, {b.batch(), b.seq_len, 64}, -3, 3);
  auto base = answer_nll(logits, b);
  auto changed = b;
  for (std::size_t i = 0; i < changed.text.size(); ++i) {
    if (changed.answer_mask[i] == 0.0 && changed.text[i] != kPad) changed.text[i] = 40;
  }
  auto again = answer_nll(logits, changed);
  EXPECT_EQ(base[0], again[0]);
  EXPECT_EQ(base[1], again[1]);
}

TEST(InstructionLoss, BatchAveragesPerSampleMeans) {
  CaptionFixture f;
  auto pair = instruction_loss(f.cap, f.vision, f.batch({0, 5}, describe_instruction())).item();
  auto a = instruction_loss(f.cap, f.vision, f.batch({0}, describe_instruction())).item();
  auto b = instruction_loss(f.cap, f.vision, f.batch({5}, describe_instruction())).item();
  EXPECT_NEAR(pair, 0.5 * (a + b), 1e-12);
}

TEST(InstructionLoss, ImageGradientMatchesFiniteDifferences) {
  CaptionFixture f;
  auto b = f.batch({6}, describe_instruction());
  auto fn = [&](const Tensor& x) {
    auto bb = b;
    bb.images = x;
    return instruction_loss(f.cap, f.vision, bb).value;
  };
  auto r = check_gradient(fn, b.images, 1e-5, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(InstructionLoss, RejectsEmptyAnswers) {
  CaptionFixture f;
  auto b = f.batch({0}, describe_instruction());
  std::fill(b.answer_mask.begin(), b.answer_mask.end(), 0.0);
  EXPECT_THROW(answer_nll(Tensor({1, b.seq_len, 64}, 0.0), b), LossError);
}

TEST(CrossEntropy, UniformTwoClass) {
  std::vector<int> y{0};
  EXPECT_NEAR(cross_entropy(Tensor({1, 2}, {0, 0}), y).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ShiftInvariant) {
  Rng rng(8);
  auto z = random_tensor(rng, {3, 5}, -4, 4);
  std::vector<int> y{1, 4, 0};
  EXPECT_NEAR(cross_entropy(z, y).item(), cross_entropy(add_scalar(z, 37.5), y).item(), 1e-12);
}

TEST(CrossEntropy, MeanOfIndependentRows) {
  Rng rng(9);
  auto z = random_tensor(rng, {3, 6}, -4, 4);
  std::vector<int> y{5, 0, 2};
  double expected = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double denom = 0.0;
    for (std::size_t k = 0; k < 6; ++k) denom += std::exp(z[i * 6 + k]);
    expected += -(z[i * 6 + static_cast<std::size_t>(y[i])] - std::log(denom));
  }
  EXPECT_NEAR(cross_entropy(z, y).item(), expected / 3.0, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  std::vector<int> y{2};
  EXPECT_THROW(cross_entropy(Tensor({1, 2}, {0, 0}), y), LossError);
}

TEST(Dlr, UntargetedHandCase) {
  std::vector<int> y{0};
  EXPECT_NEAR(dlr_loss(Tensor({1, 3}, {3, 1, 0}), y).item(), -2.0 / 3.0, 1e-12);
}

TEST(Dlr, TargetedHandCase) {
  std::vector<int> y{0}, t{2};
  EXPECT_NEAR(dlr_loss(Tensor({1, 4}, {3, 1, 0, -1}), y, std::span<const int>(t)).item(), -6.0 / 7.0, 1e-12);
}

TEST(Dlr, ScaleInvariant) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto z = random_tensor(rng, {4, 6}, -3, 3);
    std::vector<int> y{0, 1, 2, 3}, t{5, 4, 3, 2};
    const double c = rng.uniform(0.1, 10.0);
    EXPECT_NEAR(dlr_loss(z, y).item(), dlr_loss(scale(z, c), y).item(), 1e-12);
    EXPECT_NEAR(dlr_loss(z, y, std::span<const int>(t)).item(),
                dlr_loss(scale(z, c), y, std::span<const int>(t)).item(), 1e-12);
  }
}

TEST(Dlr, Errors) {
  std::vector<int> y{0}, t{1};
  EXPECT_THROW(dlr_loss(Tensor({1, 2}, {1, 0}), y), LossError);
  EXPECT_THROW(dlr_loss(Tensor({1, 3}, {1, 0, 2}), y, std::span<const int>(t)), LossError);
  EXPECT_THROW(dlr_loss(Tensor({1, 3}, {1, 1, 1}), y), LossError);
}

TEST(LossGradients, AllLossesPassGradientCheck) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> y{1, 0, 3}, t{2, 3, 0};
    auto z = random_tensor(rng, {3, 5}, -2, 2);
    EXPECT_TRUE(check_gradient([&](const Tensor& x) { return cross_entropy(x, y).value; }, z).passed);
    EXPECT_TRUE(check_gradient([&](const Tensor& x) { return dlr_loss(x, y).value; }, z).passed);
    EXPECT_TRUE(
        check_gradient([&](const Tensor& x) { return dlr_loss(x, y, std::span<const int>(t)).value; }, z).passed);
    auto txt = unit_rows(rng, 3, 4);
    auto raw = random_tensor(rng, {3, 4});
    auto r = check_gradient([&](const Tensor& x) { return contrastive_loss(l2_normalize(x, 1), txt, 0.3).value; }, raw);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
  }
}
