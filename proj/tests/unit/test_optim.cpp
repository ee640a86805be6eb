#include "attmil/errors.hpp"
#include "attmil/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace attmil;

namespace {

ModelParams scalar_params(double value) {
  ModelParams p;
  p.add("x", Tensor::full({1}, value));
  return p;
}

ModelConfig toy_model() {
  ModelConfig c;
  c.num_classes = 2;
  c.instance_shape = {1, 4, 4};
  c.embed_dim = 8;
  c.attention_hidden = 4;
  c.conv_channels = {2, 2, 2, 2, 2};
  return c;
}

// Two classes; class-1 bags contain one bright instance.
Dataset toy_dataset(Index patients_per_class, Index bags_per_patient, std::uint64_t seed) {
  GeneratorConfig g;
  g.num_classes = 2;
  g.instance_shape = {1, 4, 4};
  g.bag_size_min = 3;
  g.bag_size_max = 5;
  g.witness_min = 0.3;
  g.witness_max = 0.4;
  g.prototype_separation = 4.0;
  g.seed = seed;
  return generate_dataset(g, patients_per_class, bags_per_patient);
}

std::vector<Index> all_bags(const Dataset& ds) {
  std::vector<Index> v(ds.bags.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Index>(i);
  return v;
}

}  // namespace

TEST(AmsGrad, ZeroGradientIsFixedPoint) {
  ModelParams p = scalar_params(0.7);
  AmsGradConfig hp;
  hp.weight_decay = 0.0;
  OptimState s = OptimState::for_params(p, hp);
  const std::vector<Tensor> g{Tensor({1})};
  for (int i = 0; i < 5; ++i) amsgrad_step(p, g, s);
  EXPECT_EQ(p.at("x")[0], 0.7);
  EXPECT_EQ(s.t, 5);
}

TEST(AmsGrad, FirstStepMovesByLearningRate) {
  ModelParams p = scalar_params(1.0);
  AmsGradConfig hp;
  hp.weight_decay = 0.0;
  OptimState s = OptimState::for_params(p, hp);
  amsgrad_step(p, std::vector<Tensor>{Tensor::full({1}, 1.0)}, s);
  // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
  EXPECT_NEAR(p.at("x")[0], 1.0 - 5e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(AmsGrad, MaxSecondMomentRetainsLargerGradient) {
  ModelParams p = scalar_params(0.0);
  AmsGradConfig hp;
  hp.weight_decay = 0.0;
  OptimState s = OptimState::for_params(p, hp);
  amsgrad_step(p, std::vector<Tensor>{Tensor::full({1}, 3.0)}, s);
  amsgrad_step(p, std::vector<Tensor>{Tensor::full({1}, 1.0)}, s);
  const double v1 = 0.001 * 9.0;
  const double v2 = 0.999 * v1 + 0.001 * 1.0;
  EXPECT_NEAR(s.v[0][0], v2, 1e-15);
  EXPECT_NEAR(s.v_max[0][0], std::max(v1, v2), 1e-15);
  EXPECT_GE(s.v_max[0][0], s.v[0][0]);
  // hand-computed parameter trajectory
  const double m1 = 0.1 * 3.0, m2 = 0.9 * m1 + 0.1 * 1.0;
  double x = -5e-4 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  x -= 5e-4 * (m2 / (1 - 0.81)) / (std::sqrt(std::max(v1, v2) / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p.at("x")[0], x, 1e-15);
}

TEST(AmsGrad, VmaxIsMonotone) {
  ModelParams p = scalar_params(0.5);
  OptimState s = OptimState::for_params(p);
  Rng rng(3);
  double prev = 0.0;
  for (int i = 0; i < 200; ++i) {
    amsgrad_step(p, std::vector<Tensor>{Tensor::full({1}, rng.normal() * (i % 17))}, s);
    EXPECT_GE(s.v_max[0][0], prev);
    prev = s.v_max[0][0];
  }
}

TEST(AmsGrad, CoupledWeightDecay) {
  ModelParams p = scalar_params(2.0);
  AmsGradConfig hp;
  hp.weight_decay = 0.5;
  OptimState s = OptimState::for_params(p, hp);
  amsgrad_step(p, std::vector<Tensor>{Tensor({1})}, s);
  // g = 0.5 * 2 = 1 > 0, so the parameter shrinks by ~lr
  EXPECT_NEAR(p.at("x")[0], 2.0 - 5e-4, 1e-10);
}

TEST(AmsGrad, NonFiniteGradientNamesParameter) {
  ModelParams p = scalar_params(1.0);
  p.add("y", Tensor({2}));
  OptimState s = OptimState::for_params(p);
  amsgrad_step(p, std::vector<Tensor>{Tensor({1}), Tensor({2})}, s);
  const std::vector<Tensor> bad{Tensor({1}), Tensor::from_values({2}, {0.0, NAN})};
  try {
    amsgrad_step(p, bad, s);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.param(), "y");
    EXPECT_EQ(e.step(), 2);
  }
  EXPECT_EQ(s.t, 1);
  EXPECT_THROW(amsgrad_step(p, std::vector<Tensor>{Tensor({1})}, s), DimensionError);
}

TEST(TrainableMask, FollowsMethod) {
  const ModelConfig base = toy_model();
  Rng rng(1);
  const ModelParams p = ModelParams::initialize(base, rng);
  auto on = [&](Method m, const std::string& name) -> bool {
    return trainable_mask(p, ModelConfig::for_method(base, m))[p.index_of(name)];
  };
  EXPECT_TRUE(on(Method::sic, "psi.weight"));
  EXPECT_FALSE(on(Method::sic, "phi.weight"));
  EXPECT_FALSE(on(Method::mil_max, "psi.weight"));
  EXPECT_FALSE(on(Method::mil_max_sic, "attention.V"));
  EXPECT_TRUE(on(Method::mil_att_sic, "attention.w"));
  EXPECT_TRUE(on(Method::mil_max, "theta.conv3.kernel"));
}

TEST(ShouldStop, Examples) {
  const std::vector<double> five(5, 0.004);
  EXPECT_TRUE(should_stop(five, 0.005, 5));
  const std::vector<double> broken{0.004, 0.004, 0.006, 0.004, 0.004};
  EXPECT_FALSE(should_stop(broken, 0.005, 5));
  const std::vector<double> shorter(4, 0.001);
  EXPECT_FALSE(should_stop(shorter, 0.005, 5));
  const std::vector<double> at_threshold(5, 0.005);
  EXPECT_FALSE(should_stop(at_threshold, 0.005, 5));
  const std::vector<double> tail{0.9, 0.5, 0.004, 0.003, 0.002, 0.001, 0.0001};
  EXPECT_TRUE(should_stop(tail, 0.005, 5));
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(train_config_from_json(to_json(t)), t);
  EXPECT_THROW(train_config_from_json({{"epochs", 3}}), ConfigError);
  t.max_epochs = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.early_stop_threshold = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.early_stop_patience = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(TrainEpoch, ZeroLearningRateKeepsParameters) {
  const Dataset ds = toy_dataset(2, 2, 1);
  const ModelConfig cfg = toy_model();
  Rng init(4);
  ModelParams p = ModelParams::initialize(cfg, init);
  const ModelParams before = p;
  AmsGradConfig hp;
  hp.learning_rate = 0.0;
  OptimState s = OptimState::for_params(p, hp);
  const auto bags = all_bags(ds);
  const EpochStats st = train_epoch(cfg, p, ds, bags, 1, s, Rng(2));
  EXPECT_EQ(p, before);
  EXPECT_NEAR(st.mean_combined_loss, 0.5 * st.mean_mil_loss + 0.5 * st.mean_sic_loss, 1e-12);
  EXPECT_EQ(st.sic_weight, 0.5);
}

TEST(TrainEpoch, WithoutSicBranchCombinedIsMil) {
  const Dataset ds = toy_dataset(2, 2, 1);
  const ModelConfig cfg = ModelConfig::for_method(toy_model(), Method::mil_max);
  Rng init(4);
  ModelParams p = ModelParams::initialize(cfg, init);
  OptimState s = OptimState::for_params(p);
  const auto bags = all_bags(ds);
  const EpochStats st = train_epoch(cfg, p, ds, bags, 3, s, Rng(2));
  EXPECT_EQ(st.mean_combined_loss, st.mean_mil_loss);
  EXPECT_TRUE(std::isnan(st.mean_sic_loss));
  EXPECT_EQ(st.monitored(), st.mean_mil_loss);
}

TEST(TrainEpoch, SameSeedSameStats) {
  const Dataset ds = toy_dataset(2, 2, 1);
  const ModelConfig cfg = toy_model();
  const auto bags = all_bags(ds);
  auto run = [&] {
    Rng init(4);
    ModelParams p = ModelParams::initialize(cfg, init);
    OptimState s = OptimState::for_params(p);
    std::vector<double> out;
    for (int e = 1; e <= 2; ++e) {
      const EpochStats st = train_epoch(cfg, p, ds, bags, e, s, Rng(8));
      out.push_back(st.mean_mil_loss);
      out.push_back(st.mean_sic_loss);
    }
    return std::make_pair(out, p);
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainEpoch, SicWeightScalesInstanceGradientExactly) {
  // One step at epoch E must equal an AMSGrad step on the gradient of
  // (1 - b^E) L_mil + b^E L_sic composed by hand.
  const Dataset ds = toy_dataset(1, 1, 2);
  const ModelConfig cfg = toy_model();
  ModelConfig no_dropout = cfg;
  no_dropout.dropout_p = 0.0;
  const std::vector<Index> one{static_cast<Index>(ds.bags.size() - 1)};
  const Bag& bag = ds.bags.back();
  for (int epoch : {1, 3}) {
    Rng init(5);
    ModelParams p = ModelParams::initialize(no_dropout, init);
    ModelParams manual = p;
    OptimState s = OptimState::for_params(p);
    OptimState sm = OptimState::for_params(manual);
    train_epoch(no_dropout, p, ds, one, epoch, s, Rng(1));

    const ParamBinding b1(manual, true), b2(manual, true);
    Rng unused(0);
    const BagGraph g1 = bag_graph(bag.instances, b1, no_dropout, true, unused);
    backward(loss_mil(*g1.logits, bag.label));
    const BagGraph g2 = bag_graph(bag.instances, b2, no_dropout, true, unused);
    backward(loss_sic(*g2.sic_logits, bag.label));
    const double w = std::pow(0.5, epoch);
    std::vector<Tensor> grads = b1.gradients();
    const std::vector<Tensor> gs = b2.gradients();
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i].data() = (1 - w) * grads[i].data() + w * gs[i].data();
    amsgrad_step(manual, grads, sm, trainable_mask(manual, no_dropout));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double diff = (p.entries()[i].value.data() - manual.entries()[i].value.data()).cwiseAbs().maxCoeff();
      EXPECT_LT(diff, 1e-12) << p.entries()[i].name << " epoch " << epoch;
    }
  }
}

TEST(TrainModel, LearnsSeparableToySet) {
  const Dataset ds = toy_dataset(4, 3, 3);
  const ModelConfig cfg = ModelConfig::for_method(toy_model(), Method::mil_att_sic);
  TrainConfig tc;
  tc.max_epochs = 30;
  tc.optimizer.learning_rate = 2e-3;
  const auto bags = all_bags(ds);
  const TrainResult r = train_model(cfg, tc, ds, bags, 6);
  ASSERT_GE(r.history.size(), 2u);
  EXPECT_LT(r.history.back().mean_mil_loss, r.history.front().mean_mil_loss);
  EXPECT_GT(evaluate_model(cfg, r.params, ds).accuracy, 0.5);
}

TEST(TrainModel, EarlyStoppingEndsTraining) {
  const Dataset ds = toy_dataset(2, 2, 3);
  const ModelConfig cfg = toy_model();
  TrainConfig tc;
  tc.max_epochs = 40;
  tc.early_stop_threshold = 1e3;  // every epoch qualifies
  tc.early_stop_patience = 3;
  const auto bags = all_bags(ds);
  const TrainResult r = train_model(cfg, tc, ds, bags, 1);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.history.size(), 3u);
}

TEST(TrainModel, RejectsMismatchedDataset) {
  const Dataset ds = toy_dataset(1, 1, 3);
  ModelConfig cfg = toy_model();
  cfg.instance_shape = {1, 8, 8};
  const auto bags = all_bags(ds);
  EXPECT_THROW(train_model(cfg, TrainConfig{}, ds, bags, 1), ConfigError);
}

TEST(RunCv, FoldsArePatientDisjointAndDeterministic) {
  const Dataset ds = toy_dataset(3, 2, 4);
  const ModelConfig cfg = toy_model();
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.folds = 3;
  const auto a = run_cv(ds, cfg, tc);
  const auto b = run_cv(ds, cfg, tc);
  ASSERT_EQ(a.size(), 3u);
  std::set<std::string> seen;
  for (std::size_t f = 0; f < a.size(); ++f) {
    EXPECT_EQ(a[f].params, b[f].params);
    EXPECT_EQ(a[f].validation_bags, b[f].validation_bags);
    std::set<std::string> patients;
    for (Index i : a[f].validation_bags) patients.insert(ds.bags[i].patient_id);
    EXPECT_EQ(patients.size(), 2u);  // one per class
    for (const auto& p : patients) EXPECT_TRUE(seen.insert(p).second);
  }
  EXPECT_EQ(seen.size(), 6u);
  tc.folds = 4;
  EXPECT_THROW(run_cv(ds, cfg, tc), ConfigError);
}

TEST(RunAblation, RowsInOrderAndThreadIndependent) {
  const Dataset ds = toy_dataset(2, 2, 5);
  TrainConfig tc;
  tc.max_epochs = 1;
  tc.folds = 2;
  const AblationResult one = run_ablation(ds, toy_model(), tc, 2, 1);
  const AblationResult two = run_ablation(ds, toy_model(), tc, 2, 3);
  ASSERT_EQ(one.rows.size(), 4u);
  EXPECT_EQ(one.rows[0].method, "sic");
  EXPECT_EQ(one.rows[1].method, "mil_max");
  EXPECT_EQ(one.rows[2].method, "mil_max_sic");
  EXPECT_EQ(one.rows[3].method, "mil_att_sic");
  EXPECT_EQ(ablation_csv(one.rows), ablation_csv(two.rows));
}
