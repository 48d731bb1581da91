#include "fedenergy/analysis.hpp"
#include "fedenergy/models.hpp"

#include <gtest/gtest.h>

using namespace fedenergy;

namespace {

Dataset regression_data(Eigen::Index d, std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, {Phase::Data, 0, 0});
  Dataset out;
  for (std::size_t j = 0; j < n; ++j) {
    DataPoint p;
    p.features.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) p.features(k) = rng.normal();
    p.target = rng.normal();
    out.push_back(p);
  }
  return out;
}

Dataset class_data(Eigen::Index d, int classes, std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.task = TaskKind::Classification;
  s.dimension = d;
  s.count = n;
  s.classes = classes;
  RngStream rng(seed, {Phase::Data, 0, 0});
  return generate_synthetic(s, rng);
}

}  // namespace

TEST(Loss, QuadraticByHand) {
  const auto model = LossModel::quadratic(2, 0.0);
  Dataset data{{Eigen::Vector2d(1.0, 2.0), 3.0}};
  ModelVector w(2);
  w << 1.0, 1.0;
  EXPECT_DOUBLE_EQ(loss(model, w, data), 0.0);
  w << 0.0, 0.0;
  EXPECT_DOUBLE_EQ(loss(model, w, data), 4.5);
  const ModelVector g = full_gradient(model, w, data);
  EXPECT_DOUBLE_EQ(g(0), -3.0);
  EXPECT_DOUBLE_EQ(g(1), -6.0);
}

TEST(Loss, RegularizerAdds) {
  const auto model = LossModel::quadratic(2, 0.5);
  Dataset data{{Eigen::Vector2d(0.0, 0.0), 0.0}};
  ModelVector w(2);
  w << 2.0, 0.0;
  EXPECT_DOUBLE_EQ(loss(model, w, data), 1.0);
  EXPECT_DOUBLE_EQ(full_gradient(model, w, data)(0), 1.0);
}

TEST(Loss, BinaryLogisticAtZeroIsLog2) {
  const auto model = LossModel::logistic(3, 2, 0.0);
  const auto data = class_data(3, 2, 10, 1);
  EXPECT_NEAR(loss(model, ModelVector::Zero(6), data), std::log(2.0), 1e-15);
}

TEST(Loss, RejectsBadShapes) {
  const auto model = LossModel::quadratic(2);
  Dataset data{{Eigen::Vector3d(1.0, 2.0, 3.0), 0.0}};
  EXPECT_THROW(loss(model, ModelVector::Zero(2), data), InvalidArgument);
  EXPECT_THROW(loss(model, ModelVector::Zero(3), Dataset{}), InvalidArgument);
  const auto clf = LossModel::logistic(1, 3, 0.1);
  Dataset bad{{Eigen::VectorXd::Ones(1), 3.0}};
  EXPECT_THROW(loss(clf, ModelVector::Zero(3), bad), InvalidArgument);
}

TEST(Loss, ModelValidation) {
  EXPECT_THROW(LossModel::quadratic(0), InvalidArgument);
  EXPECT_THROW(LossModel::quadratic(2, -1.0), InvalidArgument);
  EXPECT_THROW(LossModel::logistic(2, 1, 0.1), InvalidArgument);
  EXPECT_THROW(LossModel::tiny_mlp(2, 33, 0), InvalidArgument);
  EXPECT_THROW(LossModel::tiny_mlp(2, 4, 1), InvalidArgument);
  EXPECT_EQ(LossModel::tiny_mlp(3, 4, 2).parameter_count(), 4 * 3 + 4 + 2 * 4 + 2);
}

TEST(Gradients, MatchFiniteDifferencesForEveryModel) {
  GradientCheckOptions opt;
  opt.trials_per_kind = 100;
  const auto r = verify_gradients(opt);
  EXPECT_TRUE(r.pass) << r.to_json().dump(2);
  EXPECT_LT(r.statistic, 1e-5);
}

TEST(Gradients, StochasticGradientOverFullBatchEqualsFullGradient) {
  const auto model = LossModel::logistic(4, 3, 0.2);
  const auto data = class_data(4, 3, 12, 4);
  ModelVector w = ModelVector::LinSpaced(12, -1.0, 1.0);
  MinibatchSample all;
  for (std::size_t j = 0; j < data.size(); ++j) all.indices.push_back(j);
  EXPECT_LT((stochastic_gradient(model, w, data, all) - full_gradient(model, w, data)).norm(), 1e-13);
}

TEST(Gradients, StochasticGradientErrors) {
  const auto model = LossModel::quadratic(2);
  const auto data = regression_data(2, 5, 1);
  EXPECT_THROW(stochastic_gradient(model, ModelVector::Zero(2), data, MinibatchSample{}), InvalidArgument);
  EXPECT_THROW(stochastic_gradient(model, ModelVector::Zero(2), data, MinibatchSample{{7}}), InvalidArgument);
}

TEST(Minibatch, WithoutReplacementAndSorted) {
  RngStream rng(3, {Phase::Minibatch, 0, 0});
  for (int k = 0; k < 200; ++k) {
    const auto s = sample_minibatch(20, 7, rng);
    ASSERT_EQ(s.indices.size(), 7u);
    for (std::size_t j = 1; j < s.indices.size(); ++j) ASSERT_LT(s.indices[j - 1], s.indices[j]);
    ASSERT_LT(s.indices.back(), 20u);
  }
}

TEST(Minibatch, OversizedBatchIsWholeSetWithoutRandomness) {
  RngStream a(3, {Phase::Minibatch, 0, 0}), b(3, {Phase::Minibatch, 0, 0});
  const auto s = sample_minibatch(4, 10, a);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_THROW(sample_minibatch(0, 1, a), InvalidArgument);
  EXPECT_THROW(sample_minibatch(3, 0, a), InvalidArgument);
}

TEST(Minibatch, InclusionIsUniform) {
  RngStream rng(8, {Phase::Minibatch, 1, 0});
  std::vector<int> hits(10, 0);
  const int draws = 30000;
  for (int k = 0; k < draws; ++k) {
    for (auto j : sample_minibatch(10, 3, rng).indices) ++hits[j];
  }
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(draws), 0.3, 0.015);
}

// Oracle: enumerate every size-b subset.
TEST(GradientMoments, ExactAgainstSubsetEnumeration) {
  const auto model = LossModel::quadratic(3, 0.1);
  const auto data = regression_data(3, 6, 5);
  const ModelVector w = ModelVector::LinSpaced(3, -0.5, 0.7);
  const ModelVector full = full_gradient(model, w, data);
  for (std::size_t b = 1; b <= 6; ++b) {
    double var = 0.0, second = 0.0;
    int subsets = 0;
    for (unsigned mask = 0; mask < (1u << 6); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != b) continue;
      MinibatchSample s;
      for (std::size_t j = 0; j < 6; ++j) {
        if (mask & (1u << j)) s.indices.push_back(j);
      }
      const ModelVector g = stochastic_gradient(model, w, data, s);
      var += (g - full).squaredNorm();
      second += g.squaredNorm();
      ++subsets;
    }
    const auto m = gradient_moments(model, w, data, b);
    EXPECT_NEAR(m.variance, var / subsets, 1e-12) << "b = " << b;
    EXPECT_NEAR(m.second_moment(), second / subsets, 1e-12) << "b = " << b;
  }
}

TEST(Optimum, QuadraticHasZeroGradient) {
  const auto model = LossModel::quadratic(4, 0.0);
  const auto data = regression_data(4, 30, 2);
  const ModelVector w = closed_form_optimum(model, data);
  EXPECT_LT(full_gradient(model, w, data).norm(), 1e-12);
  EXPECT_NEAR(minimum_value(model, data), loss(model, w, data), 1e-14);
}

TEST(Optimum, RankDeficientQuadraticThrows) {
  const auto model = LossModel::quadratic(3, 0.0);
  Dataset data;
  for (int j = 0; j < 5; ++j) data.push_back({Eigen::Vector3d(j, 2.0 * j, 1.0), static_cast<double>(j)});
  EXPECT_THROW(closed_form_optimum(model, data), RankDeficient);
  EXPECT_TRUE(std::isfinite(minimum_value(model, data)));
}

TEST(Optimum, LogisticReachesTinyGradient) {
  const auto model = LossModel::logistic(5, 4, 0.05);
  const auto data = class_data(5, 4, 200, 3);
  const ModelVector w = closed_form_optimum(model, data);
  EXPECT_LT(full_gradient(model, w, data).norm(), 1e-10);
  EXPECT_THROW(closed_form_optimum(LossModel::logistic(5, 4, 0.0), data), RankDeficient);
}

TEST(Optimum, TinyMlpUnsupported) {
  const auto model = LossModel::tiny_mlp(2, 3, 0);
  const auto data = regression_data(2, 4, 1);
  EXPECT_THROW(closed_form_optimum(model, data), UnsupportedModel);
  std::vector<Dataset> sets{data};
  EXPECT_THROW(estimate_constants(model, sets, {}, 1), UnsupportedModel);
}

TEST(Constants, QuadraticCurvatureSandwich) {
  const auto model = LossModel::quadratic(3, 0.2);
  std::vector<Dataset> sets{regression_data(3, 40, 1), regression_data(3, 40, 2)};
  const auto est = estimate_constants(model, sets, {}, 4);
  for (const auto& data : sets) {
    const Eigen::MatrixXd X = design_matrix(data);
    Eigen::MatrixXd H = X.transpose() * X / static_cast<double>(X.rows());
    H.diagonal().array() += 0.2;
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H).eigenvalues();
    EXPECT_LE(est.constants.mu, ev.minCoeff() + 1e-12);
    EXPECT_GE(est.constants.L, ev.maxCoeff() - 1e-12);
  }
  EXPECT_GE(est.constants.mu, 0.2);
}

TEST(Accuracy, PerfectSeparation) {
  const auto model = LossModel::logistic(2, 2, 0.0);
  Dataset data{{Eigen::Vector2d(1.0, 0.0), 0.0}, {Eigen::Vector2d(0.0, 1.0), 1.0}};
  ModelVector w(4);
  w << 1.0, 0.0, 0.0, 1.0;
  EXPECT_DOUBLE_EQ(classification_accuracy(model, w, data), 1.0);
  EXPECT_THROW(classification_accuracy(LossModel::quadratic(2), ModelVector::Zero(2), data), UnsupportedModel);
}
