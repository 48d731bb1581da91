#include "fedenergy/experiments.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace fedenergy;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Bias, PooledOptimumHasZeroPooledDistance) {
  ModelVector pooled_opt(2), g0(2), g1(2);
  pooled_opt << 0.0, 0.0;
  g0 << 1.0, 0.0;
  g1 << -1.0, 0.0;
  const std::vector<ModelVector> groups{g0, g1};
  const auto at_pooled = bias_metric(pooled_opt, pooled_opt, groups);
  EXPECT_EQ(at_pooled.pooled_distance, 0.0);
  EXPECT_LT(at_pooled.score, 0.0);
  const auto at_group = bias_metric(g0, pooled_opt, groups);
  EXPECT_GT(at_group.score, 0.0);
  EXPECT_DOUBLE_EQ(at_group.group_distances[0], 0.0);
  EXPECT_THROW(bias_metric(ModelVector::Zero(3), pooled_opt, groups), InvalidArgument);
  EXPECT_THROW(bias_metric(g0, pooled_opt, {}), InvalidArgument);
}

TEST(Presets, AllValidate) {
  for (const auto& name : preset_names()) {
    const auto p = preset(name);
    ASSERT_TRUE(p.has_value()) << name;
    EXPECT_NO_THROW(p->validate()) << name;
  }
  EXPECT_FALSE(preset("missing").has_value());
}

TEST(Presets, PaperShapeMatchesTheSetup) {
  const auto p = *preset("paper-shape");
  EXPECT_EQ(p.partition.clients, 40);
  ASSERT_EQ(p.partition.groups.size(), 4u);
  const int cycles[4] = {1, 5, 10, 20};
  for (int k = 0; k < 4; ++k) EXPECT_EQ(p.partition.groups[static_cast<std::size_t>(k)].cycle, cycles[k]);
  EXPECT_EQ(p.local_steps, 5);
  EXPECT_EQ(p.total_iterations / p.local_steps, 1000);
  EXPECT_GE(p.seeds.size(), 5u);
  EXPECT_EQ(p.policies.size(), 4u);
}

TEST(Config, ValidationNamesTheKey) {
  auto c = *preset("smoke");
  c.total_iterations = 41;
  try {
    c.validate();
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_EQ(std::string(e.what()).rfind("total_iterations", 0), 0u);
  }
  c = *preset("smoke");
  c.policies.clear();
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = *preset("smoke");
  c.total_iterations = 6;  // 6 / (2 * 2) is fractional for the E = 2 group
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.allow_ragged_epochs = true;
  EXPECT_NO_THROW(c.validate());
}

TEST(Comparison, SinglePolicyGivesOneRow) {
  auto c = *preset("smoke");
  c.policies = {PolicyKind::EagerBenchmark1};
  const auto cmp = run_comparison(c);
  ASSERT_EQ(cmp.policies.size(), 1u);
  EXPECT_EQ(summary_json(cmp)["table"].size(), 1u);
}

TEST(Comparison, PoliciesShareDataAndInitialization) {
  const auto cmp = run_comparison(*preset("smoke"));
  const auto& first = cmp.policies.front().runs.front().logs.front();
  for (const auto& s : cmp.policies) EXPECT_EQ(s.runs.front().logs.front().model_hash, first.model_hash);
  ASSERT_TRUE(cmp.prepared.optimal_loss.has_value());
  EXPECT_EQ(cmp.prepared.group_optima.size(), 2u);
  for (const auto& s : cmp.policies) {
    ASSERT_TRUE(s.final_gap.has_value());
    EXPECT_GE(s.final_gap->mean, -1e-12);
  }
}

TEST(Comparison, JobsDoNotChangeOutputs) {
  const auto c = *preset("smoke");
  const auto dir = std::filesystem::temp_directory_path() / "fedenergy_test_jobs";
  std::filesystem::remove_all(dir);
  const auto files1 = write_outputs(run_comparison(c, 1), dir / "j1");
  const auto files4 = write_outputs(run_comparison(c, 4), dir / "j4");
  ASSERT_EQ(files1, files4);
  for (const auto& f : files1) EXPECT_EQ(slurp(dir / "j1" / f), slurp(dir / "j4" / f)) << f;
  std::filesystem::remove_all(dir);
}

TEST(Comparison, CurvesHoldStepsForBenchmark2) {
  auto c = *preset("smoke");
  c.policies = {PolicyKind::WaitForAllBenchmark2};
  const auto cmp = run_comparison(c);
  const auto& curve = cmp.policies.front().curve;
  for (std::size_t k = 2; k < curve.size(); ++k) {
    if ((k - 1) % 2 != 0) EXPECT_EQ(curve[k].loss.mean, curve[k - 1].loss.mean);
  }
}

TEST(Statistics, MeanStd) {
  const std::vector<double> xs{1.0, 2.0, 3.0};
  const auto m = mean_std(xs);
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.std, 1.0);
  EXPECT_EQ(mean_std(std::vector<double>{4.0}).std, 0.0);
}

TEST(Comparison, OptimumSkewBiasDirection) {
  const auto cmp = run_comparison(*preset("optimum-skew"));
  const auto& eager = cmp.of(PolicyKind::EagerBenchmark1);
  const auto& paper = cmp.of(PolicyKind::PaperUniformSlot);
  for (const auto& b : eager.bias) EXPECT_LT(b.group_distances[0], b.pooled_distance);  // pulled to the E = 1 group
  for (const auto& b : paper.bias) {
    EXPECT_LT(b.pooled_distance, *std::min_element(b.group_distances.begin(), b.group_distances.end()));
  }
  EXPECT_GT(eager.bias_score->mean, paper.bias_score->mean);
}
