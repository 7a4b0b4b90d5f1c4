#include <gtest/gtest.h>

#include <random>

#include "rarl/backbone.hpp"
#include "rarl/losses.hpp"

using namespace rarl;

namespace {

BackboneConfig small_cfg(std::uint64_t seed = 1) {
  BackboneConfig c;
  c.input_dim = 3;
  c.hidden = {5};
  c.feature_dim = 4;
  c.seed = seed;
  return c;
}

Tensor inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor x(Shape{n, d});
  for (double& v : x.data()) v = g(rng);
  return x;
}

}  // namespace

TEST(Config, Validation) {
  BackboneConfig c = small_cfg();
  c.hidden.clear();
  EXPECT_THROW(Backbone{c}, Error);
  OptimizerConfig o;
  o.milestones = {120, 80};
  EXPECT_THROW(o.validate(), Error);
  o.milestones = {80, 160};
  EXPECT_THROW(o.validate(), Error);
  o = OptimizerConfig{};
  EXPECT_NO_THROW(o.validate());
  EXPECT_EQ(o.learning_rate, 0.1);
  EXPECT_EQ(o.momentum, 0.9);
  EXPECT_EQ(o.weight_decay, 5e-4);
}

TEST(Extract, ShapeAndDeterminism) {
  Backbone b(small_cfg());
  const Tensor x = inputs(7, 3, 2);
  const Tensor f = b.features(x);
  EXPECT_EQ(f.rows(), 7u);
  EXPECT_EQ(f.cols(), 4u);
  Tensor twice(Shape{2, 3});
  for (std::size_t i = 0; i < 3; ++i) twice(0, i) = twice(1, i) = x(0, i);
  const Tensor g = b.features(twice);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(g(0, k), g(1, k));
  EXPECT_EQ(Backbone(small_cfg()).features(x), f);
  EXPECT_THROW(b.features(inputs(2, 4, 1)), ShapeError);
}

TEST(Extract, ZeroWeightsGiveZeroFeatures) {
  Backbone b(small_cfg());
  for (Parameter* p : b.parameters())
    for (double& v : p->value.data()) v = 0.0;
  const Tensor f = b.features(inputs(3, 3, 4));
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sgd, PlainDescent) {
  Parameter p{"p", Tensor::vector({1.0, -2.0})};
  OptimizerConfig c;
  c.momentum = 0.0;
  c.weight_decay = 0.0;
  SgdState s;
  sgd_step({{&p, Tensor::vector({0.5, 1.0})}}, c, 0, s);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(p.value[1], -2.0 - 0.1 * 1.0);
}

TEST(Sgd, MilestoneSchedule) {
  OptimizerConfig c;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(79), 0.1);
  EXPECT_NEAR(c.lr_at(80), 0.01, 1e-15);
  EXPECT_NEAR(c.lr_at(120), 0.001, 1e-15);
  EXPECT_EQ(c.lr_at(100), c.lr_at(100));
}

TEST(Sgd, MomentumSecondUpdate) {
  Parameter p{"p", Tensor::scalar(0.0)};
  OptimizerConfig c;
  c.weight_decay = 0.0;
  SgdState s;
  const double g = 2.0;
  sgd_step({{&p, Tensor::scalar(g)}}, c, 0, s);
  const double after1 = p.value.item();
  sgd_step({{&p, Tensor::scalar(g)}}, c, 0, s);
  EXPECT_NEAR(after1, -0.1 * g, 1e-15);
  EXPECT_NEAR(after1 - p.value.item(), 0.1 * 1.9 * g, 1e-15);
}

TEST(Sgd, DecayOnlyWhereEnabled) {
  Parameter w{"w", Tensor::scalar(1.0), true}, eta{"eta", Tensor::scalar(1.0), false};
  OptimizerConfig c;
  c.momentum = 0.0;
  c.weight_decay = 0.5;
  SgdState s;
  sgd_step({{&w, Tensor::scalar(0.0)}, {&eta, Tensor::scalar(0.0)}}, c, 0, s);
  EXPECT_DOUBLE_EQ(w.value.item(), 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(eta.value.item(), 1.0);
  EXPECT_THROW(sgd_step({{&w, Tensor::vector({1.0, 2.0})}}, c, 0, s), ShapeError);
}

TEST(Model, HeadDefaults) {
  Model m(small_cfg());
  EXPECT_EQ(m.eta(), 10.0);
  EXPECT_NEAR(m.pnbr_a(), 0.1, 1e-15);
  EXPECT_TRUE(m.shared_eta());
  EXPECT_EQ(&m.vii_eta_param(), &m.head().eta);
  Model sep(small_cfg(), 10.0, 0.1, false);
  EXPECT_EQ(&sep.vii_eta_param(), &sep.head().eta_vii);
  EXPECT_THROW(Model(small_cfg(), 10.0, 1.0), Error);
}

TEST(Snapshot, Isolation) {
  Model m(small_cfg());
  const Tensor x = inputs(5, 3, 9);
  const ModelSnapshot a = snapshot(m), b = snapshot(m);
  EXPECT_EQ(a.features(x), m.backbone().features(x));
  EXPECT_EQ(a.features(x), b.features(x));
  const auto before = a.features(x).checksum();
  for (Parameter* p : m.parameters())
    for (double& v : p->value.data()) v += 0.1;
  EXPECT_EQ(a.features(x).checksum(), before);
  EXPECT_NE(m.backbone().features(x).checksum(), before);
}

TEST(Checkpoint, RoundTripWithOptimizerState) {
  Model m(small_cfg(3), 7.0, 0.2, false);
  SgdState s;
  Tape t;
  Var l = mean(m.backbone().extract(t, inputs(4, 3, 1)));
  sgd_step(t.backward(l), OptimizerConfig{}, 0, s);
  const auto j = model_to_json(m, s);
  SgdState s2;
  Model back = model_from_json(j, &s2);
  const Tensor x = inputs(6, 3, 5);
  EXPECT_EQ(back.backbone().features(x), m.backbone().features(x));
  EXPECT_EQ(back.eta(), m.eta());
  EXPECT_EQ(back.pnbr_a(), m.pnbr_a());
  EXPECT_FALSE(back.shared_eta());
  ASSERT_EQ(s2.momentum.size(), s.momentum.size());
  for (const auto& [k, v] : s.momentum) EXPECT_EQ(s2.momentum.at(k), v);
}

// Micro-model with 2 hidden units, 2 classes and 4 samples: every backbone
// weight's L_Total gradient agrees with central differences.
TEST(Properties, EndToEndTotalGradient) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BackboneConfig c;
    c.input_dim = 3;
    c.hidden = {2};
    c.activation = Activation::tanh;
    c.feature_dim = 3;
    c.seed = seed;
    Model m(c, 3.0);
    auto bank = build_etf(3, 3, seed);
    const auto cols = bank.activate({0, 1}, "micro");
    bank.init_virtual_prototypes(cols, seed);
    const Tensor x = inputs(4, 3, seed + 50);
    const std::vector<int> labels{0, 1, 0, 1};
    const std::vector<std::size_t> targets{0, 1, 0, 1};
    const std::vector<bool> old{true, false, true, false};
    const Tensor snap = Model(c).backbone().features(x);
    LossWeights w;
    auto f = [&](Tape& t) {
      Var z = m.backbone().extract(t, x);
      Var eta = t.param(m.head().eta);
      OnbrRows rows{targets, old, w.A, w.onbr_variant};
      LossComponents comp;
      comp.ce = ce_active(cosine_logits(z, bank, eta, LogitMode::active_only, &rows), targets);
      auto vb = synthesize_virtual(x, labels, w.mix);
      Var zv = m.backbone().extract(t, vb->inputs);
      VirtualHead head = virtual_head(t, bank, cols);
      comp.v = virtual_ce(zv, head, targets, eta);
      comp.vii = vii_loss(z, targets, zv, targets, head, eta, sigmoid(t.param(m.head().pnbr_raw)));
      comp.dis = distill_loss(z, snap);
      return total_loss(comp, w, 2, 1, 1).value;
    };
    const auto ps = m.backbone().parameters();
    const FdReport r = finite_diff_check(f, std::span<Parameter* const>(ps));
    ASSERT_FALSE(r.excluded);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " " << r.worst_param << "[" << r.worst_index << "]";
  }
}
