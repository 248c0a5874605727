#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dvd/checkpoint.hpp"
#include "dvd/gradcheck.hpp"
#include "dvd/ops.hpp"
#include "dvd/optim.hpp"
#include "support.hpp"

using namespace dvd;
using dvd::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Primitives, MatmulByIdentity) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(a, eye)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Primitives, SoftmaxOfEqualLogits) {
  auto y = softmax(Tensor({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Primitives, L2NormalizeThreeFourFive) {
  auto y = l2_normalize(Tensor({2}, {3, 4}), 0);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Primitives, ShapeErrorNamesPrimitiveAndShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({4})), ShapeError);
}

TEST(Primitives, NonFiniteOutputIsAnError) {
  EXPECT_THROW(log(Tensor({1}, {-1.0})), NonFiniteError);
  EXPECT_THROW(exp(Tensor({1}, {1000.0})), NonFiniteError);
  EXPECT_THROW(Tensor({1}, {std::nan("")}), NonFiniteError);
}

TEST(Primitives, BroadcastBiasAndMask) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3}, {10, 20, 30});
  EXPECT_EQ(values(add(x, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Tensor col({2, 1}, {1, -1});
  EXPECT_EQ(values(mul(x, col)), (std::vector<double>{1, 2, 3, -4, -5, -6}));
}

TEST(Primitives, TransposeSliceConcat) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(transpose(x)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(values(slice(x, 1, 1, 3)), (std::vector<double>{2, 3, 5, 6}));
  std::vector<Tensor> parts{x, slice(x, 0, 0, 1)};
  auto c = concat(parts, 0);
  EXPECT_EQ(c.shape(), (Shape{3, 3}));
  EXPECT_EQ(values(c), (std::vector<double>{1, 2, 3, 4, 5, 6, 1, 2, 3}));
}

TEST(Backward, QuadraticSum) {
  Tensor x = Tensor({3}, {1, 2, 3}).set_requires_grad(true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(values(x.grad_tensor()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, Mean) {
  Tensor x = Tensor({4}, {1, 2, 3, 4}).set_requires_grad(true);
  backward(mean(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Backward, AccumulatesAcrossUsesAndCalls) {
  Tensor x = Tensor({2}, {1.5, -2}).set_requires_grad(true);
  backward(sum(add(mul(x, x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Backward, Errors) {
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
  EXPECT_THROW(backward(mul(x, x)), GraphError);  // non-scalar
  EXPECT_THROW(backward(sum(Tensor({2}, {1, 2}))), GraphError);  // detached
  auto y = sum(mul(x, x));
  backward(y);
  EXPECT_THROW(backward(y), GraphError);  // graph already released
}

TEST(Backward, NoGradGuardSkipsRecording) {
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
  NoGradGuard guard;
  auto y = sum(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, GradWrtLeavesOtherLeavesUntouched) {
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
  Tensor w = Tensor({2}, {3, 4}).set_requires_grad(true);
  auto g = grad(sum(mul(x, w)), x);
  EXPECT_EQ(values(g), (std::vector<double>{3, 4}));
  EXPECT_FALSE(w.has_grad());
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, ThreeLayerCompositionMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor w1 = random_tensor(rng, {5, 8});
  Tensor w2 = random_tensor(rng, {8, 6});
  Tensor w3 = random_tensor(rng, {6, 3});
  Tensor g = random_tensor(rng, {8});
  Tensor b = random_tensor(rng, {8});
  auto net = [&](const Tensor& x) {
    auto h = gelu(matmul(x, w1));
    h = layer_norm(h, g, b);
    h = softmax(matmul(h, w2), 1);
    return mean(exp(matmul(h, w3)));
  };
  Tensor x = random_tensor(rng, {4, 5});
  Tensor leaf = x.detach().set_requires_grad(true);
  auto analytic = grad(net(leaf), leaf);
  auto numeric = dvd::testing::numeric_gradient(
      [&](const Tensor& p) {
        NoGradGuard guard;
        return net(p).item();
      },
      x);
  EXPECT_LT(dvd::testing::max_rel_error(analytic.data(), numeric), 1e-4);
}

TEST(Backward, IsLinear) {
  Rng rng(3);
  Tensor w = random_tensor(rng, {4, 4});
  auto f = [&](const Tensor& x) { return sum(exp(matmul(x, w))); };
  auto g = [&](const Tensor& x) { return mean(gelu(x)); };
  Tensor x0 = random_tensor(rng, {3, 4});
  const double a = 0.7, c = -1.3;
  Tensor x = x0.detach().set_requires_grad(true);
  auto combined = grad(add(scale(f(x), a), scale(g(x), c)), x);
  auto gf = grad(f(x), x);
  auto gg = grad(g(x), x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(combined[i], a * gf[i] + c * gg[i], 1e-12);
}

TEST(Backward, SoftmaxIsADistribution) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto y = softmax(random_tensor(rng, {3, 7}, -20, 20), 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        EXPECT_GE(y[r * 7 + k], 0.0);
        s += y[r * 7 + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, SeededRerunIsBitwiseIdentical) {
  auto run = [] {
    Rng rng(99);
    Tensor w = random_tensor(rng, {6, 6}).set_requires_grad(true);
    Tensor x = random_tensor(rng, {4, 6});
    backward(mean(softmax(matmul(gelu(matmul(x, w)), w), 1)));
    return values(w.grad_tensor());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, ExpSumPasses) {
  auto r = check_gradient([](const Tensor& x) { return sum(exp(x)); }, Tensor({2}, {0, 1}), 1e-5, 1e-4);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, ConstantPasses) {
  auto r = check_gradient([](const Tensor&) { return Tensor::scalar(3.0); }, Tensor({3}, {1, 2, 3}), 1e-5, 1e-4);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, ZeroToleranceFails) {
  auto r = check_gradient([](const Tensor& x) { return sum(exp(x)); }, Tensor({2}, {0, 1}), 1e-5, 0.0);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.0);
}

TEST(GradCheck, DetectsNonDeterminism) {
  int calls = 0;
  auto fn = [&](const Tensor& x) { return add_scalar(sum(x), static_cast<double>(calls++)); };
  EXPECT_THROW(check_gradient(fn, Tensor({2}, {0, 1})), std::runtime_error);
}

TEST(Optimizer, SgdPlainStep) {
  ParamList p{{"w", Tensor::scalar(1.0)}};
  auto s = OptimizerState::sgd(0.1);
  std::vector<Tensor> g{Tensor::scalar(2.0)};
  optimizer_step(s, p, g);
  EXPECT_DOUBLE_EQ(p[0].value.item(), 0.8);
  EXPECT_EQ(s.step, 1u);
}

TEST(Optimizer, ZeroGradientStillCountsStep) {
  ParamList p{{"w", Tensor({2}, {1.0, -1.0})}};
  auto s = OptimizerState::adamw(1e-3);
  std::vector<Tensor> g{Tensor({2}, 0.0)};
  optimizer_step(s, p, g);
  optimizer_step(s, p, g);
  EXPECT_EQ(values(p[0].value), (std::vector<double>{1.0, -1.0}));
  EXPECT_EQ(s.step, 2u);
}

TEST(Optimizer, AdamWFirstStep) {
  ParamList p{{"w", Tensor::scalar(0.0)}};
  auto s = OptimizerState::adamw(1e-3, 0.0, 0.9, 0.999, 1e-8);
  std::vector<Tensor> g{Tensor::scalar(1.0)};
  optimizer_step(s, p, g);
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
  EXPECT_NEAR(p[0].value.item(), -1e-3 / (1.0 + 1e-8), 1e-18);
  ASSERT_EQ(s.first_moment.size(), 1u);
  ASSERT_EQ(s.second_moment.size(), 1u);
}

TEST(Optimizer, SgdWithoutMomentumKeepsNoBuffers) {
  ParamList p{{"w", Tensor::scalar(1.0)}};
  auto s = OptimizerState::sgd(0.1);
  std::vector<Tensor> g{Tensor::scalar(1.0)};
  optimizer_step(s, p, g);
  EXPECT_TRUE(s.first_moment.empty());
  EXPECT_TRUE(s.second_moment.empty());
}

TEST(Optimizer, RejectsMisalignedOrNonFiniteGradients) {
  ParamList p{{"layer.weight", Tensor({2}, 1.0)}};
  auto s = OptimizerState::sgd(0.1);
  std::vector<Tensor> wrong{Tensor({3}, 0.0)};
  EXPECT_THROW(optimizer_step(s, p, wrong), ShapeError);
  // Tensors refuse non-finite values, so inject one through the leaf buffer.
  Tensor bad({2}, 0.0);
  bad.data_mut()[1] = std::numeric_limits<double>::infinity();
  std::vector<Tensor> g{bad};
  try {
    optimizer_step(s, p, g);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
  EXPECT_EQ(s.step, 0u);
}

TEST(Checkpoint, ByteLayoutConformance) {
  ParamList p{{"ab", Tensor({1, 2}, {1.0, -2.0})}};
  const std::vector<std::uint8_t> expected{
      'D', 'D', 'F', '1',                              // magic
      1, 0, 0, 0,                                      // tensor count
      2, 0, 0, 0, 'a', 'b',                            // name
      1,                                               // dtype f64
      2, 0, 0, 0,                                      // ndim
      1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0,  // dims
      0, 0, 0, 0, 0, 0, 0xF0, 0x3F,                    // 1.0
      0, 0, 0, 0, 0, 0, 0x00, 0xC0,                    // -2.0
  };
  EXPECT_EQ(encode_checkpoint(p), expected);
  auto back = decode_checkpoint(expected);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "ab");
  EXPECT_EQ(back[0].value.shape(), (Shape{1, 2}));
  EXPECT_EQ(values(back[0].value), (std::vector<double>{1.0, -2.0}));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  Rng rng(1);
  ParamList p{{"a", random_tensor(rng, {3, 4})}, {"b.c", random_tensor(rng, {5})}};
  auto path = std::filesystem::temp_directory_path() / "dvd_ckpt_test.ddf";
  save_checkpoint(path, p);
  auto back = load_checkpoint(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, p[i].name);
    EXPECT_EQ(values(back[i].value), values(p[i].value));
  }
  auto bytes = encode_checkpoint(p);
  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::BadMagic);
  }
  auto cut = bytes;
  cut.pop_back();
  try {
    decode_checkpoint(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::Truncated);
  }
  std::filesystem::remove(path);
}
