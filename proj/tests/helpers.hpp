#pragma once

#include "fedenergy/data.hpp"
#include "fedenergy/fedtrain.hpp"

#include <vector>

namespace fedenergy::testing {

/// Regression clients with their own ground truths; weights proportional to sizes.
inline std::vector<ClientProfile> regression_clients(const std::vector<int>& cycles, Eigen::Index d, std::size_t n,
                                                     std::uint64_t seed, double gap = 1.0) {
  RngStream truth_rng(seed, {Phase::Instance, 99, 0});
  const auto truths = make_group_truths(d, static_cast<int>(cycles.size()), gap, truth_rng);
  std::vector<ClientProfile> clients;
  for (std::size_t i = 0; i < cycles.size(); ++i) {
    SyntheticSpec s;
    s.dimension = d;
    s.count = n + i;
    s.noise = 0.3;
    s.ground_truth = {truths[i]};
    RngStream rng(seed, {Phase::Data, i, 0});
    ClientProfile c;
    c.id = static_cast<int>(i);
    c.cycle = cycles[i];
    c.data = generate_synthetic(s, rng);
    clients.push_back(std::move(c));
  }
  assign_weights(clients);
  return clients;
}

inline RunConfig basic_run(std::vector<ClientProfile> clients, PolicyKind policy, std::int64_t T, std::int64_t K,
                           std::uint64_t seed = 3) {
  RunConfig cfg;
  cfg.model = LossModel::quadratic(clients.front().data.front().features.size(), 0.1);
  cfg.clients = std::move(clients);
  cfg.policy = policy;
  cfg.local_steps = T;
  cfg.total_iterations = K;
  cfg.lr = LearningRateSchedule::constant(0.05);
  cfg.batch_size = 2;
  cfg.seed = seed;
  cfg.initial_model = ModelVector::Zero(cfg.model.parameter_count());
  return cfg;
}

}  // namespace fedenergy::testing
