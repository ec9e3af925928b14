#include <gtest/gtest.h>

#include <fstream>

#include "grad_check.hpp"
#include "rdwi/nn/checkpoint.hpp"
#include "rdwi/nn/model.hpp"
#include "rdwi/train.hpp"

namespace rdwi::nn {
namespace {

ModelConfig micro(std::size_t blocks = 2, std::size_t size = 8) {
  ModelConfig c;
  c.height = c.width = size;
  c.blocks = blocks;
  c.filters = 4;
  c.heads = 2;
  c.convs_per_block = 2;
  return c;
}

template <class T>
Var<T> random_input(SeededRng& rng, const ModelConfig& c, double lo = 0.0, double hi = 1.0) {
  const Shape s{1, c.input_channels(), c.height, c.width};
  std::vector<T> v(s.size());
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return constant<T>(s, std::move(v));
}

// Closed-form count: a conv-norm-SiLU unit has 9*ci*co weights + co bias + 2*co affine; a dense
// block of K units over ci input channels adds a 1x1 projection of ci + K*f channels.
std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t f = c.filters, K = c.convs_per_block, L = c.blocks, d = f / c.heads;
  auto unit = [](std::size_t ci, std::size_t co) { return 9 * ci * co + 3 * co; };
  auto dense = [&](std::size_t ci) { return 9 * f * (K * ci + f * K * (K - 1) / 2) + 3 * K * f + (ci + K * f) * f + f; };
  const std::size_t hb = c.height >> (L - 1), wb = c.width >> (L - 1);
  const std::size_t attention = c.attention_enabled ? 2 * (4 * f * f + f + d * (hb + wb)) : 0;
  const std::size_t mid = unit(f, f) + unit(2 * f, f) + unit(3 * f, f) + attention + 4 * f * f + f;
  return dense(c.backbone_channels()) + (L - 1) * (unit(f, f) + dense(f)) + mid + (L - 1) * unit(f, f) + L * dense(2 * f) +
         2 * (f + 1);
}

TEST(DeepAdcNet, ParameterCountMatchesClosedForm) {
  ModelConfig def;
  EXPECT_EQ(DeepAdcNet<float>(def).parameter_count(), expected_parameter_count(def));
  SeededRng rng(1);
  for (int k = 0; k < 8; ++k) {
    ModelConfig c = micro(1 + rng.below(3), 16);
    c.filters = 2 * (1 + rng.below(4));
    c.convs_per_block = 1 + rng.below(3);
    c.attention_enabled = rng.below(2) == 1;
    c.input_mode = rng.below(2) ? InputMode::adc_only : InputMode::adc_plus_dwi;
    EXPECT_EQ(DeepAdcNet<float>(c).parameter_count(), expected_parameter_count(c)) << k;
  }
}

TEST(DeepAdcNet, ConfigValidation) {
  ModelConfig c = micro();
  c.height = 9;
  EXPECT_THROW(DeepAdcNet<float>{c}, ConfigError);
  c = micro();
  c.heads = 3;
  EXPECT_THROW(DeepAdcNet<float>{c}, ConfigError);
  c = micro();
  c.b_values = {100.0};
  EXPECT_THROW(DeepAdcNet<float>{c}, ConfigError);
  c = micro();
  c.adc_min = 0.004;
  EXPECT_THROW(DeepAdcNet<float>{c}, ConfigError);
}

TEST(DeepAdcNet, OutputShapesAndInputErrors) {
  const ModelConfig c = micro();
  const DeepAdcNet<float> m(c);
  SeededRng rng(2);
  Graph<float> g(false);
  const auto out = m.forward(g, random_input<float>(rng, c));
  EXPECT_EQ(out.adc->shape, (Shape{1, 1, 8, 8}));
  EXPECT_EQ(out.s0->shape, (Shape{1, 1, 8, 8}));
  EXPECT_EQ(out.dwi_hat->shape, (Shape{1, 5, 8, 8}));
  EXPECT_THROW(m.forward(g, constant<float>(Shape{1, 5, 8, 8}, std::vector<float>(320, 0.5f))), DataError);
  EXPECT_THROW(m.forward(g, constant<float>(Shape{1, 6, 4, 4}, std::vector<float>(96, 0.5f))), DataError);
  auto bad = random_input<float>(rng, c);
  bad->value[17] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(m.forward(g, bad), NumericalError);
}

TEST(DeepAdcNet, HeadBoundsHoldUnderExtremeWeights) {
  SeededRng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    ModelConfig c = micro();
    c.init_seed = 100 + trial;
    DeepAdcNet<float> m(c);
    const float gain = trial % 2 ? 1e4f : 1.0f;  // saturate the heads on odd trials
    for (const char* name : {"head_adc.w", "head_s0.w", "head_adc.b", "head_s0.b"})
      for (auto& v : m.parameter(name).values()) v = gain * (v + static_cast<float>(rng.uniform(-1, 1)));
    for (int k = 0; k < 5; ++k) {
      Graph<float> g(false);
      auto in = random_input<float>(rng, c, 0.0, 1.0);
      const auto out = m.forward(g, in);
      for (std::size_t p = 0; p < 64; ++p) {
        const double adc = out.adc->value[p] * kAdcMax;
        ASSERT_GE(adc, 0.0);
        ASSERT_LE(adc, kAdcMax);
        ASSERT_GE(out.s0->value[p], in->value[p]);  // channel 0 is S_1
      }
    }
  }
}

TEST(DeepAdcNet, AttentionAblationIsDistinguishable) {
  ModelConfig on = micro(3, 16), off = on;
  off.attention_enabled = false;
  const DeepAdcNet<double> a(on), b(off);
  for (const auto& p : b.parameters())
    EXPECT_EQ(p.values(), const_cast<DeepAdcNet<double>&>(a).parameter(p.name).values()) << p.name;
  SeededRng rng(4);
  auto in = random_input<double>(rng, on);
  Graph<double> g(false);
  const auto ya = a.forward(g, in).adc->value, yb = b.forward(g, in).adc->value;
  double diff = 0;
  for (std::size_t i = 0; i < ya.size(); ++i) diff = std::max(diff, std::abs(ya[i] - yb[i]));
  EXPECT_GT(diff, 1e-9);
}

TEST(DeepAdcNet, AdcOnlyIgnoresDwiChannels) {
  ModelConfig c = micro();
  c.input_mode = InputMode::adc_only;
  const DeepAdcNet<double> m(c);
  SeededRng rng(5);
  auto in = random_input<double>(rng, c);
  auto other = constant<double>(in->shape, in->value);
  for (std::size_t i = 64; i < 5 * 64; ++i) other->value[i] = rng.uniform();  // S_2..S_5 only
  Graph<double> g(false);
  EXPECT_EQ(m.forward(g, in).adc->value, m.forward(g, other).adc->value);
}

TEST(DeepAdcNet, EndToEndLossGradient) {
  ModelConfig c = micro();
  DeepAdcNet<double> m(c);
  SeededRng rng(6);
  auto in = random_input<double>(rng, c, 0.05, 1.0);
  // Targets below every prediction keep the L1 terms away from their kinks.
  auto adc_t = constant<double>(Shape{1, 1, 8, 8}, std::vector<double>(64, -1.0));
  auto s0_t = constant<double>(Shape{1, 1, 8, 8}, std::vector<double>(64, -1.0));
  auto dwi_t = constant<double>(Shape{1, 5, 8, 8}, std::vector<double>(320, -1.0));
  std::vector<test::DVar> leaves;
  for (auto& p : m.parameters()) leaves.push_back(p.var);
  const LossWeights w;
  const double err = test::graph_fd_error(leaves, [&](Graph<double>& g) {
    auto out = m.forward(g, in);
    return total_loss(g, losses(g, out, adc_t, s0_t, dwi_t), w);
  }, 1e-5);
  EXPECT_LE(err, 1e-5);
}

TEST(Checkpoint, RoundTripPreservesParametersMomentsAndOutputs) {
  test::TempDir dir("ckpt");
  ModelConfig c = micro();
  c.init_seed = 9;
  DeepAdcNet<float> m(c);
  SeededRng rng(7);
  for (auto& p : m.parameters())
    for (std::size_t i = 0; i < p.values().size(); ++i) {
      p.moment1[i] = static_cast<float>(rng.uniform(-1, 1));
      p.moment2[i] = static_cast<float>(rng.uniform(0, 1));
    }
  save_checkpoint(dir.path() / "m", m, 42);
  const auto ck = load_checkpoint<float>(dir.path() / "m");
  EXPECT_EQ(ck.step, 42u);
  EXPECT_TRUE(ck.model.config() == c);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& a = m.parameters()[i];
    const auto& b = ck.model.parameters()[i];
    ASSERT_EQ(a.name, b.name);
    ASSERT_EQ(a.values(), b.values());
    ASSERT_EQ(a.moment1, b.moment1);
    ASSERT_EQ(a.moment2, b.moment2);
  }
  auto in = random_input<float>(rng, c);
  Graph<float> g(false);
  EXPECT_EQ(m.forward(g, in).adc->value, ck.model.forward(g, in).adc->value);

  std::filesystem::remove(dir.path() / "m" / "head_adc.w.qdwi");
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "m"), DataError);
  std::ofstream(dir.path() / "m" / "manifest.json") << "{not json";
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "m"), DataError);
  EXPECT_THROW(load_checkpoint<float>(dir.path() / "missing"), DataError);
}

TEST(Checkpoint, CopyParametersAcrossPrecisions) {
  const ModelConfig c = micro();
  DeepAdcNet<float> f(c);
  DeepAdcNet<double> d(c);
  for (auto& p : f.parameters())
    for (auto& v : p.values()) v *= 0.5f;
  copy_parameters(d, f);
  for (std::size_t i = 0; i < f.parameters().size(); ++i)
    for (std::size_t j = 0; j < f.parameters()[i].values().size(); ++j)
      ASSERT_EQ(d.parameters()[i].values()[j], static_cast<double>(f.parameters()[i].values()[j]));
  ModelConfig other = c;
  other.filters = 8;
  DeepAdcNet<double> e(other);
  EXPECT_THROW(copy_parameters(e, f), ConfigError);
}

}  // namespace
}  // namespace rdwi::nn
