#include <gtest/gtest.h>

#include <filesystem>

#include "freqexit/gfnet.hpp"
#include "freqexit/rng.hpp"
#include "test_util.hpp"

using namespace freqexit;
using freqexit::testing::central_difference;
using freqexit::testing::random_tensor;
using freqexit::testing::rel_error;

namespace {

GfnetConfig tiny_config(std::size_t depth, std::size_t dim, bool dual) {
  GfnetConfig c;
  c.image_size = 8;
  c.patch_size = 2;
  c.embed_dim = dim;
  c.depth = depth;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  c.dual_head = dual;
  return c;
}

TensorR random_image(const GfnetConfig& c, Rng& rng) {
  TensorR img({c.image_size, c.image_size, kImageChannels});
  for (auto& v : img.data()) v = rng.uniform();
  return img;
}

void zero(Parameter& p) { p.value.fill(0.0); }

}  // namespace

TEST(GfnetConfig, RejectsIndivisibleImage) {
  GfnetConfig c;
  c.image_size = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GfnetConfig{};
  c.depth = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ForwardTrace, ZeroFeedForwardBlockIsIdentity) {
  const GfnetConfig c = tiny_config(1, 6, false);
  GfnetModel m(c, 3);
  m.blocks()[0].filter.k_half.value.fill(Complex(1.0, 0.0));
  zero(m.blocks()[0].fc2.weight);
  zero(m.blocks()[0].fc2.bias);
  Rng rng(1);
  const BlockTrace tr = forward_trace(m, random_image(c, rng));
  ASSERT_EQ(tr.hidden.size(), 1u);
  EXPECT_LT(max_abs_diff(tr.hidden[0], tr.embedding), 1e-10);
}

TEST(ForwardTrace, HasOneGridPerBlock) {
  const GfnetConfig c = tiny_config(3, 4, false);
  const GfnetModel m(c, 4);
  Rng rng(2);
  const BlockTrace tr = forward_trace(m, random_image(c, rng));
  ASSERT_EQ(tr.hidden.size(), 3u);
  for (const auto& h : tr.hidden) EXPECT_EQ(h.shape(), (Shape{4, 4, 4}));
  EXPECT_EQ(&tr.layer(0), &tr.embedding);
  EXPECT_EQ(&tr.layer(3), &tr.hidden[2]);
}

TEST(ForwardTrace, DeterministicForFixedSeed) {
  const GfnetConfig c = tiny_config(2, 8, true);
  Rng r1(5), r2(5);
  const BlockTrace a = forward_trace(GfnetModel(c, 9), random_image(c, r1));
  const BlockTrace b = forward_trace(GfnetModel(c, 9), random_image(c, r2));
  ASSERT_EQ(a.hidden.size(), b.hidden.size());
  for (std::size_t i = 0; i < a.hidden.size(); ++i) EXPECT_EQ(a.hidden[i], b.hidden[i]);
}

TEST(ForwardTrace, WrongImageShapeIsDimensionError) {
  const GfnetConfig c = tiny_config(1, 4, false);
  const GfnetModel m(c, 1);
  EXPECT_THROW(forward_trace(m, TensorR({8, 8, 1})), DimensionError);
  EXPECT_THROW(classify(m, TensorR({6, 8, 3})), DimensionError);
}

TEST(Classify, TraceTailThroughHeadsEqualsClassify) {
  const GfnetConfig c = tiny_config(2, 8, true);
  const GfnetModel m(c, 11);
  Rng rng(3);
  const TensorR img = random_image(c, rng);
  const BlockTrace tr = forward_trace(m, img);
  const Logits via_trace = head_logits(m, tr.hidden.back());
  const Logits direct = classify(m, img);
  EXPECT_LT(max_abs_diff(via_trace.cls, direct.cls), 1e-12);
  ASSERT_TRUE(direct.dist.has_value());
  EXPECT_LT(max_abs_diff(*via_trace.dist, *direct.dist), 1e-12);
}

TEST(Classify, ZeroHeadsGiveZeroLogitsAndClassZero) {
  const GfnetConfig c = tiny_config(1, 4, true);
  GfnetModel m(c, 2);
  zero(m.cls_head().weight);
  zero(m.cls_head().bias);
  zero(m.dist_head()->weight);
  zero(m.dist_head()->bias);
  Rng rng(4);
  const Logits l = classify(m, random_image(c, rng));
  for (double v : l.cls.data()) EXPECT_EQ(v, 0.0);
  for (double v : l.dist->data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(fused_prediction(l), 0);
}

TEST(Classify, SingleHeadHasNoDistLogits) {
  const GfnetConfig c = tiny_config(1, 4, false);
  Rng rng(5);
  EXPECT_FALSE(classify(GfnetModel(c, 1), random_image(c, rng)).dist.has_value());
}

TEST(Classify, FusedProbabilitiesAverageBothHeads) {
  Logits l{TensorR({3}, std::vector<double>{2.0, 0.0, 0.0}),
           TensorR({3}, std::vector<double>{0.0, 0.0, 3.0})};
  const auto p = fused_probabilities(l);
  const auto a = softmax(l.cls.data()), b = softmax(l.dist->data());
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(p[k], 0.5 * (a[k] + b[k]));
  EXPECT_EQ(fused_prediction(l), 2);
}

TEST(Classify, BatchMatchesSingleImage) {
  const GfnetConfig c = tiny_config(2, 8, true);
  const GfnetModel m(c, 6);
  Rng rng(6);
  std::vector<TensorR> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(c, rng));
  std::vector<const TensorR*> ptrs;
  for (const auto& i : imgs) ptrs.push_back(&i);
  const auto batch = classify_batch(m, ptrs);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const Logits one = classify(m, imgs[i]);
    EXPECT_LT(max_abs_diff(batch[i].cls, one.cls), 1e-10);
    EXPECT_LT(max_abs_diff(*batch[i].dist, *one.dist), 1e-10);
  }
}

TEST(ParamCount, MatchesContainerEntrySizes) {
  for (bool dual : {false, true}) {
    const GfnetModel m(tiny_config(2, 8, dual), 1);
    std::size_t n = 0;
    for (const auto& e : m.to_entries()) {
      if (const auto* r = std::get_if<TensorR>(&e.tensor)) n += r->size();
      else n += 2 * std::get<TensorC>(e.tensor).size();
    }
    EXPECT_EQ(param_count(m), n);
    EXPECT_EQ(param_count(m.config()), n);
  }
}

TEST(ParamCount, TeacherExceedsStudentAndGrowsWithWidth) {
  EXPECT_GE(param_count(default_teacher_config()), param_count(default_student_config()));
  GfnetConfig c = tiny_config(2, 8, false);
  GfnetConfig wide = c;
  wide.embed_dim = 16;
  EXPECT_GT(param_count(wide), param_count(c));
  EXPECT_GT(flops_forward(wide, 2), flops_forward(c, 2));
  EXPECT_GT(flops_full(wide), flops_full(c));
}

TEST(Flops, NoBlocksCostsOnlyPatchEmbedding) {
  const GfnetConfig c = default_student_config();
  EXPECT_EQ(flops_forward(c, 0), flops::patch_embed(c));
  EXPECT_EQ(flops::patch_embed(c), flops::linear(c.tokens(), c.patch_dim(), c.embed_dim));
}

TEST(Flops, ForwardTelescopesOverBlocks) {
  const GfnetConfig c = default_teacher_config();
  std::uint64_t sum = flops_forward(c, 0);
  for (std::size_t b = 1; b <= c.depth; ++b) sum += flops_forward(c, b) - flops_forward(c, b - 1);
  EXPECT_EQ(sum, flops_forward(c, c.depth));
  EXPECT_EQ(flops_full(c), flops_forward(c, c.depth) + flops::head(c));
  EXPECT_THROW(flops_forward(c, c.depth + 1), IndexError);
}

TEST(Flops, BlockFormulaByHand) {
  const GfnetConfig c = default_student_config();
  const std::uint64_t s = 64, d = 32, h = 128;
  const std::uint64_t fft = 5 * s * 6 * d;
  const std::uint64_t ff = (2 * s * d * h + s * h) + 8 * s * h + (2 * s * h * d + s * d);
  const std::uint64_t expect = 2 * 8 * s * d + 2 * fft + 6 * s * d + ff + 2 * s * d;
  EXPECT_EQ(flops::block(c), expect);
}

TEST(ModelFile, SaveLoadRoundTripsExactly) {
  const auto dir = std::filesystem::temp_directory_path() / "freqexit_gfnet_test";
  std::filesystem::create_directories(dir);
  const GfnetModel m(tiny_config(2, 8, true), 77);
  save_model(dir / "m.fxt", m);
  EXPECT_TRUE(std::filesystem::exists(sidecar_path(dir / "m.fxt")));
  const GfnetModel back = load_model(dir / "m.fxt");
  EXPECT_EQ(back.config(), m.config());
  EXPECT_TRUE(back == m);
  save_model(dir / "n.fxt", back);
  EXPECT_EQ(read_file(dir / "m.fxt"), read_file(dir / "n.fxt"));
  std::filesystem::remove_all(dir);
}

TEST(ModelFile, ConfigJsonRoundTrip) {
  const GfnetConfig c = tiny_config(3, 12, true);
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
}

TEST(EndToEnd, TwoBlockModelMatchesFiniteDifferences) {
  const GfnetConfig c = tiny_config(2, 8, true);
  GfnetModel m(c, 21);
  Rng rng(22);
  // Move weights away from their tiny init so every path carries signal.
  for (auto& b : m.blocks())
    for (auto& v : b.filter.k_half.value.data()) v += Complex(0.5 * rng.normal(), 0.5 * rng.normal());
  for (auto& b : m.blocks()) b.filter.project_self_conjugate();
  m.for_each_parameter([&](const std::string&, Parameter& p) {
    for (auto& v : p.value.data()) v += 0.3 * rng.normal();
  });
  const std::vector<TensorR> imgs{random_image(c, rng), random_image(c, rng)};
  const std::vector<const TensorR*> ptrs{&imgs[0], &imgs[1]};
  const std::vector<int> labels{1, 3};

  auto build = [&](Tape& t) {
    Var x = m.embed(t, ptrs);
    for (std::size_t i = 0; i < c.depth; ++i) x = m.block(t, i, x, 2);
    Var pooled = m.pool(t, x, 2);
    Var a = softmax_cross_entropy(t, m.head_cls(t, pooled), labels);
    Var b = softmax_cross_entropy(t, m.head_dist(t, pooled), labels);
    return add(t, scale(t, a, 0.5), scale(t, b, 0.5));
  };
  auto loss = [&] {
    Tape t(false);
    return t.value(build(t))[0];
  };

  m.zero_grads();
  {
    Tape t;
    t.backward(build(t));
  }

  struct Probe {
    double* slot;
    double analytic;
  };
  std::vector<Probe> all;
  m.for_each_parameter([&](const std::string&, Parameter& p) {
    for (std::size_t i = 0; i < p.value.size(); ++i) all.push_back({&p.value[i], p.grad[i]});
  });
  for (auto& b : m.blocks()) {
    auto& k = b.filter.k_half;
    for (std::size_t i = 0; i < k.value.size(); ++i) {
      auto* pair = reinterpret_cast<double*>(&k.value[i]);
      all.push_back({pair, k.grad[i].real()});
      all.push_back({pair + 1, k.grad[i].imag()});
    }
  }
  Rng pick(23);
  for (int probe = 0; probe < 50; ++probe) {
    const Probe& p = all[pick.below(all.size())];
    EXPECT_LT(rel_error(p.analytic, central_difference(loss, *p.slot)), 1e-3) << "probe " << probe;
  }
}
