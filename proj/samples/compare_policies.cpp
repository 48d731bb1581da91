// Runs the four scheduling policies on a small optimum-skew problem and prints the
// final optimality gap and bias score of each.
#include "fedenergy/experiments.hpp"

#include <cstdio>

int main() {
  using namespace fedenergy;
  ExperimentConfig cfg = *preset("smoke");
  cfg.total_iterations = 200;
  cfg.seeds = {1, 2, 3, 4, 5};

  const Comparison cmp = run_comparison(cfg, default_jobs());
  std::printf("%-8s %14s %12s\n", "policy", "gap", "bias");
  for (const auto& s : cmp.policies) {
    std::printf("%-8s %14.6g %12.4f\n", to_string(s.policy), s.final_gap->mean, s.bias_score->mean);
  }
}
