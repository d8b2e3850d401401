#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "freqexit/autodiff.hpp"
#include "freqexit/rng.hpp"
#include "freqexit/serialize.hpp"
#include "test_util.hpp"

using namespace freqexit;
using freqexit::testing::central_difference;
using freqexit::testing::random_tensor;
using freqexit::testing::rel_error;

namespace {

TensorR triple_loop(const TensorR& a, const TensorR& b) {
  TensorR out({a.extent(0), b.extent(1)});
  for (std::size_t i = 0; i < a.extent(0); ++i)
    for (std::size_t j = 0; j < b.extent(1); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.extent(1); ++k) acc += a.at(i, k) * b.at(k, j);
      out.at(i, j) = acc;
    }
  return out;
}

TensorR eval_matmul(const TensorR& a, const TensorR& b) {
  Tape t(false);
  return t.value(matmul(t, t.constant(a), t.constant(b)));
}

// Checks every entry of every parameter against central differences.
void expect_gradients_match(const std::vector<Parameter*>& params,
                            const std::function<Var(Tape&)>& build, double tol = 1e-4) {
  for (auto* p : params) p->zero_grad();
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
  }
  auto loss_value = [&] {
    Tape t(false);
    return t.value(build(t))[0];
  };
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double numeric = central_difference(loss_value, p->value[i]);
      EXPECT_LT(rel_error(p->grad[i], numeric), tol)
          << "entry " << i << " analytic " << p->grad[i] << " numeric " << numeric;
    }
  }
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const TensorR a = random_tensor({2, 3}, rng);
  const TensorR eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_EQ(eval_matmul(eye, a), a);
}

TEST(Matmul, HandArithmetic) {
  const TensorR a({2, 2}, {1, 2, 3, 4});
  const TensorR b({2, 1}, {1, 1});
  EXPECT_EQ(eval_matmul(a, b), TensorR({2, 1}, {3, 7}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(7);
  const TensorR a = random_tensor({5, 7}, rng);
  const TensorR b = random_tensor({7, 3}, rng);
  EXPECT_LT(max_abs_diff(eval_matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(eval_matmul(TensorR({2, 3}), TensorR({2, 3})), DimensionError);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), l = 1 + rng.below(6),
                      n = 1 + rng.below(6);
    const TensorR a = random_tensor({m, k}, rng);
    const TensorR b = random_tensor({k, l}, rng);
    const TensorR c = random_tensor({l, n}, rng);
    EXPECT_LT(max_abs_diff(eval_matmul(eval_matmul(a, b), c), eval_matmul(a, eval_matmul(b, c))),
              1e-10);
  }
}

TEST(LayerNorm, ConstantRowNormalisesToZero) {
  Tape t(false);
  Var y = layernorm(t, t.constant(TensorR({1, 4}, 3.5)), t.constant(TensorR({4}, 1.0)),
                    t.constant(TensorR({4})), 1e-6);
  for (double v : t.value(y).data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroGammaBroadcastsBeta) {
  Rng rng(2);
  Tape t(false);
  const TensorR beta({3}, {0.5, -1.0, 2.0});
  Var y = layernorm(t, t.constant(random_tensor({4, 3}, rng)), t.constant(TensorR({3})),
                    t.constant(beta), 1e-6);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(t.value(y).at(r, c), beta[c]);
}

TEST(LayerNorm, RandomRowHasUnitMoments) {
  Rng rng(3);
  Tape t(false);
  Var y = layernorm(t, t.constant(random_tensor({1, 64}, rng, 3.0)),
                    t.constant(TensorR({64}, 1.0)), t.constant(TensorR({64})), 1e-6);
  const auto& v = t.value(y);
  double mean = 0.0, var = 0.0;
  for (double e : v.data()) mean += e;
  mean /= 64.0;
  for (double e : v.data()) var += (e - mean) * (e - mean);
  var /= 64.0;
  EXPECT_LT(std::abs(mean), 1e-12);
  EXPECT_LT(std::abs(var - 1.0), 1e-6);
}

TEST(Gelu, ZeroAndAsymptotes) {
  EXPECT_EQ(gelu_value(0.0), 0.0);
  EXPECT_NEAR(gelu_value(10.0), 10.0, 1e-4);
  EXPECT_NEAR(gelu_value(-10.0), 0.0, 1e-4);
}

TEST(Gelu, TanhFormAgreesWithErfFormWithinBand) {
  for (double x = -5.0; x <= 5.0; x += 0.25) {
    const double exact = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    EXPECT_NEAR(gelu_value(x), exact, 1e-3) << "x=" << x;
  }
}

TEST(Gelu, TapeValueMatchesScalarFormula) {
  Rng rng(5);
  const TensorR x = random_tensor({3, 5}, rng, 2.0);
  Tape t(false);
  const TensorR& y = t.value(gelu(t, t.constant(x)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], gelu_value(x[i]), 1e-14);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  const std::vector<double> logits(10, 0.7);
  EXPECT_NEAR(softmax_cross_entropy(logits, 4), std::log(10.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, SaturatedLogitsGiveZero) {
  const std::vector<double> logits = {100.0, 0.0, 0.0};
  EXPECT_NEAR(softmax_cross_entropy(logits, 0), 0.0, 1e-40);
}

TEST(SoftmaxCrossEntropy, MatchesDirectFormula) {
  const std::vector<double> logits = {1.0, 2.0, 3.0};
  const long double direct =
      std::log(std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L)) - 3.0L;
  EXPECT_NEAR(softmax_cross_entropy(logits, 2), static_cast<double>(direct), 1e-15);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeIsIndexError) {
  const std::vector<double> logits = {1.0, 2.0};
  EXPECT_THROW(softmax_cross_entropy(logits, 2), IndexError);
  EXPECT_THROW(softmax_cross_entropy(logits, -1), IndexError);
}

TEST(SoftmaxCrossEntropy, NonNegativeOnRandomLogits) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> logits(2 + rng.below(10));
    for (auto& v : logits) v = 5.0 * rng.normal();
    EXPECT_GE(softmax_cross_entropy(logits, static_cast<int>(rng.below(logits.size()))), 0.0);
  }
}

TEST(Argmax, TiesResolveToLowestIndex) {
  const std::vector<double> v = {0.2, 0.5, 0.5, 0.1};
  EXPECT_EQ(argmax(v), 1);
  const std::vector<double> z(4, 0.0);
  EXPECT_EQ(argmax(z), 0);
}

TEST(Backward, IndependentParameterGetsZeroGradient) {
  Parameter p(TensorR({2, 2}, 1.0));
  Parameter q(TensorR({2, 2}, {1.0, 2.0, 0.5, -1.0}));
  p.zero_grad();
  Tape t;
  t.param(p);
  Var logits = matmul(t, t.constant(TensorR({1, 2}, {0.3, 0.1})), t.param(q));
  t.backward(softmax_cross_entropy(t, logits, std::vector<int>{0}));
  for (double g : p.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, LinearLossGradientIsInput) {
  const TensorR x({3, 1}, {0.5, -2.0, 4.0});
  Parameter w(TensorR({1, 3}, {1.0, 1.0, 1.0}));
  w.zero_grad();
  Tape t;
  Var loss = matmul(t, t.param(w), t.constant(x));
  t.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w.grad[i], x[i]);
}

TEST(Backward, TwiceWithoutForwardIsStateError) {
  Parameter w(TensorR({1, 1}, 2.0));
  Tape t;
  Var loss = matmul(t, t.param(w), t.constant(TensorR({1, 1}, 3.0)));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), StateError);
}

TEST(Backward, NonScalarLossIsRejected) {
  Parameter w(TensorR({2, 2}, 1.0));
  Tape t;
  Var y = t.param(w);
  EXPECT_THROW(t.backward(y), DimensionError);
}

TEST(Backward, FrozenParameterReceivesNothing) {
  Parameter w(TensorR({1, 1}, 2.0));
  w.trainable = false;
  w.zero_grad();
  Tape t;
  Var loss = matmul(t, t.param(w), t.constant(TensorR({1, 1}, 3.0)));
  t.backward(loss);
  EXPECT_EQ(w.grad[0], 0.0);
}

TEST(Backward, AccumulatesAdditivelyAndZeroGradResets) {
  Rng rng(4);
  Parameter w(random_tensor({3, 2}, rng));
  const TensorR x = random_tensor({4, 3}, rng);
  const std::vector<int> labels = {0, 1, 1, 0};
  auto run = [&] {
    Tape t;
    Var loss = softmax_cross_entropy(t, matmul(t, t.constant(x), t.param(w)), labels);
    t.backward(loss);
  };
  w.zero_grad();
  run();
  const TensorR once = w.grad;
  run();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(w.grad[i], 2.0 * once[i], 1e-15);
  w.zero_grad();
  for (double g : w.grad.data()) EXPECT_EQ(g, 0.0);
  run();
  EXPECT_EQ(w.grad, once);
}

TEST(GradientCheck, Matmul) {
  Rng rng(21);
  Parameter a(random_tensor({3, 4}, rng)), b(random_tensor({4, 2}, rng));
  const std::vector<int> labels = {1, 0, 1};
  expect_gradients_match({&a, &b}, [&](Tape& t) {
    return softmax_cross_entropy(t, matmul(t, t.param(a), t.param(b)), labels);
  });
}

TEST(GradientCheck, AddScaleBias) {
  Rng rng(22);
  Parameter a(random_tensor({3, 4}, rng)), b(random_tensor({3, 4}, rng)),
      bias(random_tensor({4}, rng));
  const std::vector<int> labels = {3, 0, 2};
  expect_gradients_match({&a, &b, &bias}, [&](Tape& t) {
    Var s = scale(t, add(t, t.param(a), t.param(b)), -1.7);
    return softmax_cross_entropy(t, add_bias(t, s, t.param(bias)), labels);
  });
}

TEST(GradientCheck, LayerNorm) {
  Rng rng(23);
  Parameter x(random_tensor({4, 6}, rng, 2.0)), gamma(random_tensor({6}, rng)),
      beta(random_tensor({6}, rng));
  const std::vector<int> labels = {0, 5, 2, 3};
  expect_gradients_match({&x, &gamma, &beta}, [&](Tape& t) {
    return softmax_cross_entropy(
        t, layernorm(t, t.param(x), t.param(gamma), t.param(beta), 1e-6), labels);
  });
}

TEST(GradientCheck, Gelu) {
  Rng rng(24);
  Parameter x(random_tensor({3, 5}, rng, 2.0));
  const std::vector<int> labels = {4, 1, 0};
  expect_gradients_match({&x}, [&](Tape& t) {
    return softmax_cross_entropy(t, gelu(t, t.param(x)), labels);
  });
}

TEST(GradientCheck, MeanRows) {
  Rng rng(25);
  Parameter x(random_tensor({6, 3}, rng));
  const std::vector<int> labels = {2, 0};
  expect_gradients_match({&x}, [&](Tape& t) {
    return softmax_cross_entropy(t, mean_rows(t, t.param(x), 2), labels);
  });
}

TEST(GradientCheck, CompositeGraph) {
  Rng rng(26);
  Parameter w1(random_tensor({5, 8}, rng, 0.5)), b1(random_tensor({8}, rng, 0.1));
  Parameter g(random_tensor({8}, rng)), be(random_tensor({8}, rng));
  Parameter w2(random_tensor({8, 3}, rng, 0.5));
  const TensorR x = random_tensor({4, 5}, rng);
  const std::vector<int> labels = {0, 2, 1, 1};
  expect_gradients_match({&w1, &b1, &g, &be, &w2}, [&](Tape& t) {
    Var h = add_bias(t, matmul(t, t.constant(x), t.param(w1)), t.param(b1));
    Var n = layernorm(t, h, t.param(g), t.param(be), 1e-6);
    Var r = add(t, gelu(t, n), scale(t, h, 0.5));
    Var pooled = mean_rows(t, r, 2);
    return softmax_cross_entropy(t, matmul(t, pooled, t.param(w2)),
                                 std::span<const int>(labels).first(2));
  });
}

// ---------------------------------------------------------------------------
// Parameter container

TEST(Container, HeaderLayoutIsBitExact) {
  std::ostringstream os(std::ios::binary);
  container::write(os, {TensorEntry{"w", TensorR({1}, {1.0})}});
  const std::string s = os.str();
  const std::string expected = std::string("FXT1") + std::string("\x01\x00\x00\x00", 4) +
                               std::string("\x01\x00\x00\x00", 4) +
                               std::string("\x01\x00\x00\x00", 4) + "w" +
                               std::string("\x00", 1) + std::string("\x01\x00\x00\x00", 4) +
                               std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8) +
                               std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);
  EXPECT_EQ(s, expected);
}

TEST(Container, RandomEntriesRoundTripBitExactly) {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<TensorEntry> entries;
    const std::size_t count = rng.below(5);
    for (std::size_t e = 0; e < count; ++e) {
      Shape shape(rng.below(4));
      for (auto& x : shape) x = 1 + rng.below(4);
      const std::string name = "entry." + std::to_string(e) + (rng.below(2) ? ".ü" : "");
      if (rng.below(2)) {
        entries.push_back({name, random_tensor(shape, rng, 1e3)});
      } else {
        TensorC c(shape);
        for (auto& v : c.data()) v = Complex(rng.normal(), rng.normal() * 1e-300);
        entries.push_back({name, c});
      }
    }
    std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
    container::write(ss, entries);
    const std::string first = ss.str();
    const auto back = container::read(ss);
    ASSERT_EQ(back, entries);
    std::ostringstream again(std::ios::binary);
    container::write(again, back);
    EXPECT_EQ(again.str(), first);
  }
}

TEST(Container, RejectsBadMagicAndTruncation) {
  std::istringstream bad("FXT2\x01\x00\x00\x00");
  EXPECT_THROW(container::read(bad), ParseError);
  std::ostringstream os(std::ios::binary);
  container::write(os, {TensorEntry{"w", TensorR({2}, {1.0, 2.0})}});
  std::istringstream truncated(os.str().substr(0, os.str().size() - 3));
  EXPECT_THROW(container::read(truncated), ParseError);
}

TEST(Rng, XoshiroReferenceStream) {
  // First outputs of xoshiro256** seeded through SplitMix64 from 0.
  Rng a(0), b(0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  std::uint64_t s = 0;
  EXPECT_EQ(splitmix64(s), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, UniformRangeAndBelow) {
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
  }
  EXPECT_NE(derive_seed(1, "teacher"), derive_seed(1, "student"));
}
