#include "fedenergy/analysis.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

using namespace fedenergy;

namespace {

QuadraticInstanceSpec small_spec() {
  QuadraticInstanceSpec s;
  s.cycles = {1, 2, 3};
  s.samples = {6, 7, 8};
  s.local_steps = 2;
  s.dimension = 2;
  s.l2 = 0.2;
  s.batch_size = 2;
  s.seed = 4;
  s.round = 3;
  s.rounds = 6;
  return s;
}

BoundInputs base_inputs() {
  BoundInputs in;
  in.mu = 0.5;
  in.L = 2.0;
  in.sigma2 = 1.0;
  in.G2 = 3.0;
  in.Gamma = 0.2;
  in.local_steps = 5;
  in.max_cycle = 4;
  in.w0_gap = 1.5;
  return in;
}

}  // namespace

TEST(Lemma1, ExhaustiveMatchesVirtualAverage) {
  const auto inst = make_quadratic_instance(small_spec());
  const auto r = verify_lemma1(inst, ExpectationMode::Exhaustive);
  EXPECT_TRUE(r.pass) << r.to_json().dump(2);
  EXPECT_LT(r.statistic, 1e-10);
}

TEST(Lemma1, MonteCarloAgrees) {
  const auto inst = make_quadratic_instance(small_spec());
  const auto r = verify_lemma1(inst, ExpectationMode::MonteCarlo, 5000);
  EXPECT_TRUE(r.pass) << r.to_json().dump(2);
}

TEST(Lemma1, LargeSupportNeedsMonteCarlo) {
  auto spec = small_spec();
  spec.cycles = {8, 8, 8};  // 512 joint outcomes
  const auto inst = make_quadratic_instance(spec);
  try {
    verify_lemma1(inst, ExpectationMode::Exhaustive);
    FAIL() << "expected an error";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("Monte Carlo"), std::string::npos);
  }
}

TEST(Lemma1, UnitCyclesGiveZeroGapBetweenSequences) {
  auto spec = small_spec();
  spec.cycles = {1, 1, 1};
  const auto inst = make_quadratic_instance(spec);
  const ModelVector w = model_at_round(inst);
  const std::vector<int> all{0, 1, 2};
  const auto vs = shadow_round(inst.training(), inst.clients, w, inst.round, all, inst.seed);
  EXPECT_EQ((vs.v_bar - vs.w_bar).squaredNorm(), 0.0);
}

TEST(Lemma1, SuiteOfTwentyInstances) {
  const auto r = verify_lemma1_suite(77, 20, ExpectationMode::Exhaustive, 0, 1);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.details.size(), 20u);
}

TEST(Shadow, RealizedModelMatchesRealRun) {
  const auto inst = make_quadratic_instance(small_spec());
  RunConfig cfg;
  cfg.model = inst.model;
  cfg.clients = inst.clients;
  cfg.local_steps = inst.local_steps;
  cfg.total_iterations = 6 * inst.local_steps;
  cfg.lr = inst.lr;
  cfg.batch_size = inst.batch_size;
  cfg.seed = inst.seed;
  cfg.initial_model = inst.initial_model;
  const auto real = run(cfg);
  const SchedulePolicy policy(PolicyKind::PaperUniformSlot, cycles_of(inst.clients), inst.local_steps, inst.seed);
  ModelVector w = inst.initial_model;
  for (std::int64_t r = 0; r < 6; ++r) {
    const auto vs = shadow_round(inst.training(), inst.clients, w, r, policy.participants(r * inst.local_steps), inst.seed);
    w = vs.realized;
    EXPECT_EQ(hash_model(w), real.logs[static_cast<std::size_t>(r + 1)].model_hash);
  }
}

TEST(Shadow, RejectsNonConvexAndAdam) {
  const auto inst = make_quadratic_instance(small_spec());
  LocalTraining t = inst.training();
  t.lr = LearningRateSchedule::adam(1e-3);
  EXPECT_THROW(shadow_round(t, inst.clients, inst.initial_model, 0, {}, 1), UnsupportedConfiguration);
  t = inst.training();
  t.model = LossModel::tiny_mlp(2, 2, 0);
  EXPECT_THROW(shadow_round(t, inst.clients, ModelVector::Zero(t.model.parameter_count()), 0, {}, 1),
               UnsupportedConfiguration);
}

TEST(Lemma2, BoundHoldsOnSmallInstance) {
  const auto inst = make_quadratic_instance(small_spec());
  Lemma2Options opt;
  opt.trials = 2000;
  const auto r = verify_lemma2(inst, opt);
  EXPECT_TRUE(r.pass) << r.to_json().dump(2);
  EXPECT_EQ(r.details.size(), 6u);
}

TEST(Lemma2, ConstantRateViolatesPremise) {
  auto inst = make_quadratic_instance(small_spec());
  inst.lr = LearningRateSchedule::constant(0.05);
  EXPECT_THROW(verify_lemma2(inst, {}), UnsupportedConfiguration);
  inst.lr = LearningRateSchedule::theorem_decay(1.0, 1.0);  // gamma < T
  EXPECT_THROW(verify_lemma2(inst, {}), UnsupportedConfiguration);
}

TEST(Gamma, ZeroForIdenticalClients) {
  auto clients = fedenergy::testing::regression_clients({1}, 3, 30, 2);
  ClientProfile twin = clients[0];
  twin.id = 1;
  clients.push_back(twin);
  assign_weights(clients);
  EXPECT_NEAR(compute_gamma(LossModel::quadratic(3, 0.1), clients), 0.0, 1e-12);
}

TEST(Gamma, PositiveForHeterogeneousClients) {
  const auto clients = fedenergy::testing::regression_clients({1, 1, 1}, 3, 30, 2, 3.0);
  EXPECT_GT(compute_gamma(LossModel::quadratic(3, 0.1), clients), 0.1);
  EXPECT_THROW(compute_gamma(LossModel::tiny_mlp(3, 2, 0), clients), UnsupportedModel);
}

TEST(Bound, MonotoneInEveryInput) {
  const BoundInputs in = base_inputs();
  for (std::int64_t K = 10; K < 10000; K *= 3) EXPECT_GT(theorem_bound(in, K), theorem_bound(in, K * 3));
  for (double s : {0.1, 1.0, 10.0}) {
    BoundInputs lo = in, hi = in;
    lo.Gamma = s;
    hi.Gamma = 2 * s;
    EXPECT_LT(theorem_bound(lo, 100), theorem_bound(hi, 100));
    lo = hi = in;
    lo.G2 = s;
    hi.G2 = 2 * s;
    EXPECT_LT(theorem_bound(lo, 100), theorem_bound(hi, 100));
    lo = hi = in;
    lo.sigma2 = s;
    hi.sigma2 = 2 * s;
    EXPECT_LT(theorem_bound(lo, 100), theorem_bound(hi, 100));
  }
  for (int e = 1; e < 20; ++e) {
    BoundInputs lo = in, hi = in;
    lo.max_cycle = e;
    hi.max_cycle = e + 1;
    EXPECT_LT(theorem_bound(lo, 100), theorem_bound(hi, 100));
  }
}

TEST(Bound, HandComputedValue) {
  BoundInputs in = base_inputs();
  // kappa = 4, gamma = 32, eta0 = 1/8, B = 1 + 2.4 + 8*16*3, C = 4*16*25*(1/64)*3
  const double B = 1.0 + 6.0 * 2.0 * 0.2 + 8.0 * 16.0 * 3.0;
  const double C = 4.0 * 16.0 * 25.0 / 64.0 * 3.0;
  const double expected = 2.0 * 4.0 / (32.0 + 68.0) * ((B + C) / 0.5 + 2.0 * 2.0 * 1.5);
  EXPECT_NEAR(theorem_bound(in, 68), expected, 1e-12 * expected);
  EXPECT_THROW(theorem_bound(in, 0), InvalidArgument);
  in.mu = 0.0;
  EXPECT_THROW(theorem_bound(in, 10), InvalidArgument);
}

TEST(RateFit, RecoversExactPowerLaw) {
  std::vector<double> ks, gaps;
  for (double k = 10; k <= 10000; k *= 1.5) {
    ks.push_back(k);
    gaps.push_back(3.0 / k);
  }
  const auto fit = rate_fit(ks, gaps);
  EXPECT_NEAR(fit.slope, -1.0, 1e-12);
  EXPECT_LE(fit.ci_low, fit.slope);
  EXPECT_GE(fit.ci_high, fit.slope);
}

TEST(RateFit, UsesTailHalfOnly) {
  std::vector<double> ks, gaps;
  for (double k = 10; k <= 10000; k *= 1.2) {
    ks.push_back(k);
    gaps.push_back(k < 300 ? 1.0 : 300.0 / k);  // flat head, 1/K tail
  }
  EXPECT_NEAR(rate_fit(ks, gaps).slope, -1.0, 1e-9);
}

TEST(RateFit, RejectsShortRanges) {
  const std::vector<double> ks{100, 200, 300, 400}, gaps{1, 0.5, 0.3, 0.25};
  EXPECT_THROW(rate_fit(ks, gaps), InvalidArgument);
  const std::vector<double> two{10, 1000}, two_gaps{1, 0.01};
  EXPECT_THROW(rate_fit(two, two_gaps), InvalidArgument);
  std::vector<std::vector<RoundLog>> few(4);
  EXPECT_THROW(rate_fit(few), InvalidArgument);
}

TEST(Theorem, DefaultInstancePasses) {
  const auto out = verify_theorem(default_theorem_instance(), {});
  EXPECT_TRUE(out.result.pass) << out.result.to_json().dump(2);
  EXPECT_GE(out.fit.slope, -1.3);
  EXPECT_LE(out.fit.slope, -0.7);
  for (std::size_t k = 0; k < out.bounds.size(); ++k) EXPECT_LE(out.mean_gaps[k], out.bounds[k]);
}

TEST(Reports, JsonSchema) {
  const auto r = verify_schedule_marginals({{2, 3}, 1000, 1});
  const auto j = r.to_json();
  for (const char* key : {"check", "instance-config-hash", "mode", "statistic", "bound", "slack", "pass", "details", "notes"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}
