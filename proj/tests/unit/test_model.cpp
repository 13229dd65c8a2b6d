#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "nhgcat/errors.hpp"
#include "nhgcat/model.hpp"

using namespace nhgcat;

namespace {

LossTerms terms(Tape& tape, double cls, double kl, double vlca, double mse) {
  return {tape.scalar(cls), tape.scalar(kl), tape.scalar(vlca), tape.scalar(mse)};
}

}  // namespace

TEST(TotalLoss, ZeroWeightsLeaveClassification) {
  Tape tape;
  TotalLoss l = total_loss(terms(tape, 0.7, 3.0, 2.0, 1.0), {0.0, 0.0, 0.0});
  EXPECT_EQ(l.parts.total, 0.7);
}

TEST(TotalLoss, WeightedKl) {
  Tape tape;
  TotalLoss l = total_loss(terms(tape, 1.0, 2.0, 0.0, 0.0), {0.1, 0.0, 0.0});
  EXPECT_NEAR(l.parts.total, 1.2, 1e-15);
  EXPECT_EQ(l.parts.w_kl, 0.1);
}

TEST(TotalLoss, DominantTermHasItsWeightHalved) {
  Tape tape;
  TotalLoss l = total_loss(terms(tape, 0.1, 0.5, 2.0, 0.3), {0.1, 1.0, 0.2});
  EXPECT_EQ(l.parts.w_vlca, 0.5);
  EXPECT_EQ(l.parts.w_kl, 0.1);
  EXPECT_EQ(l.parts.w_mse, 0.2);
  EXPECT_NEAR(l.parts.total, 0.1 + 0.05 + 1.0 + 0.06, 1e-15);
  // Exactly at the ratio is not above it.
  TotalLoss edge = total_loss(terms(tape, 0.1, 1.0, 0.0, 0.0), {1.0, 1.0, 1.0});
  EXPECT_EQ(edge.parts.w_kl, 1.0);
}

TEST(TotalLoss, DecomposesIntoWeightedParts) {
  RngStream rng(3, "loss");
  for (int i = 0; i < 200; ++i) {
    Tape tape;
    const double cls = rng.uniform() * 2.0, kl = rng.uniform() * 30.0, vl = rng.uniform() * 5.0,
                 mse = rng.uniform() * 40.0;
    TotalLoss l = total_loss(terms(tape, cls, kl, vl, mse), {rng.uniform(), rng.uniform(), rng.uniform()});
    const auto& p = l.parts;
    EXPECT_NEAR(p.total, p.cls + p.w_kl * p.kl + p.w_vlca * p.vlca + p.w_mse * p.mse, 1e-10);
    EXPECT_EQ(l.total.item(), p.total);
  }
}

TEST(TotalLoss, AbsentTermsContributeNothing) {
  Tape tape;
  LossTerms t;
  t.cls = tape.scalar(0.4);
  t.kl = tape.scalar(1.0);
  TotalLoss l = total_loss(t, {0.5, 1.0, 1.0});
  EXPECT_DOUBLE_EQ(l.parts.total, 0.9);
  EXPECT_EQ(l.parts.vlca, 0.0);
  EXPECT_THROW(total_loss(LossTerms{}, {}), UsageError);
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
  Tape tape;
  try {
    total_loss(terms(tape, 0.5, 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0), {});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("vlca"), std::string::npos) << e.what();
  }
  EXPECT_THROW(total_loss(terms(tape, 0.5, std::numeric_limits<double>::infinity(), 0.0, 0.0), {}), NumericalError);
}

TEST(TotalLoss, GradientCarriesEffectiveWeights) {
  Tape tape;
  LossTerms t{tape.variable({1}, {0.1}), tape.variable({1}, {0.5}), tape.variable({1}, {2.0}),
              tape.variable({1}, {0.3})};
  TotalLoss l = total_loss(t, {0.1, 1.0, 0.2});
  tape.backward(l.total);
  EXPECT_EQ(t.cls.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(t.kl.grad()[0], 0.1);
  EXPECT_DOUBLE_EQ(t.vlca.grad()[0], 0.5);
  EXPECT_DOUBLE_EQ(t.mse.grad()[0], 0.2);
}

TEST(Probability, SoftmaxOfTwoLogits) {
  Tape tape;
  auto p = positive_probability(tape.constant({3, 2}, {0.0, 0.0, 0.0, std::log(3.0), 5.0, -5.0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  EXPECT_NEAR(p[2], 1.0 / (1.0 + std::exp(10.0)), 1e-18);
}

TEST(Model, PresetsSizeTheNetwork) {
  ModelConfig desk = desk_model(16, 120), full = full_model(90, 200);
  EXPECT_EQ(desk.rg.dim, 32u);
  EXPECT_EQ(desk.rg.ve_latent, 8u);
  EXPECT_EQ(desk.vlca.attn_dim, 16u);
  EXPECT_EQ(full.rg.dim, 128u);
  EXPECT_EQ(full.vlca.attn_dim, 64u);
  EXPECT_EQ(full.rg.timepoints, 200u);
  EXPECT_EQ(desk.hc.input_dim, desk.rg.ve_latent);
  EXPECT_THROW(preset_model("huge", 16, 120), UsageError);
}

TEST(Model, EvaluationForwardIsDeterministicAndSeedsDiffer) {
  auto s = nhgcat::testing::small_cohort(31);
  const ModelConfig config = desk_model(s.cohort.regions(), s.cohort.timepoints());
  auto logits = [&](std::uint64_t seed) {
    Model model = make_model(config, s.cohort.atlas, seed);
    auto batch = nhgcat::testing::batch_of(s.features, 6);
    Tape tape;
    Binder bind(tape, model.params);
    ForwardOptions opt;
    BatchForward out = forward_batch(model, bind, batch, s.templates, opt);
    EXPECT_TRUE(out.terms.cls.valid());
    return std::vector<double>(out.logits.values().begin(), out.logits.values().end());
  };
  EXPECT_EQ(logits(5), logits(5));
  EXPECT_NE(logits(5), logits(6));
}

TEST(Model, InferenceSkipsLabelTerms) {
  auto s = nhgcat::testing::small_cohort(32);
  Model model = make_model(desk_model(s.cohort.regions(), s.cohort.timepoints()), s.cohort.atlas, 1);
  auto batch = nhgcat::testing::batch_of(s.features, 3);
  Tape tape;
  Binder bind(tape, model.params);
  ForwardOptions opt;
  opt.use_labels = false;
  BatchForward out = forward_batch(model, bind, batch, s.templates, opt);
  EXPECT_FALSE(out.terms.cls.valid());
  EXPECT_FALSE(out.terms.mse.valid());
  EXPECT_THROW(forward_batch(model, bind, {}, s.templates, opt), UsageError);
}

TEST(Model, TrainingStreamsDependOnSubjectNotBatchPosition) {
  auto s = nhgcat::testing::small_cohort(33);
  Model model = make_model(desk_model(s.cohort.regions(), s.cohort.timepoints()), s.cohort.atlas, 1);
  ForwardOptions opt;
  opt.training = true;
  opt.seed = 4;
  opt.stream = "epoch0";
  auto run = [&](std::vector<BatchItem> batch) {
    Tape tape;
    Binder bind(tape, model.params);
    BatchForward out = forward_batch(model, bind, batch, s.templates, opt);
    return std::vector<double>(out.logits.values().begin(), out.logits.values().end());
  };
  auto ab = run({{&s.features[0], &s.features[0].graph}, {&s.features[1], &s.features[1].graph}});
  auto ba = run({{&s.features[1], &s.features[1].graph}, {&s.features[0], &s.features[0].graph}});
  EXPECT_EQ(ab[0], ba[2]);
  EXPECT_EQ(ab[1], ba[3]);
  EXPECT_EQ(ab[2], ba[0]);
}
