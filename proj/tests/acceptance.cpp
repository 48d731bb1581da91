// Acceptance suite: one PASS/FAIL line per criterion; exit status 0 iff all pass.
#include "fedenergy/analysis.hpp"
#include "fedenergy/cli.hpp"
#include "fedenergy/experiments.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

using namespace fedenergy;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int sim(const std::string& args) {
  const std::string cmd = std::string(FEDENERGY_SIM_PATH) + " --log-level warn " + args + " > /dev/null";
  return WEXITSTATUS(std::system(cmd.c_str()));
}

/// Every file except the timestamped manifest must match byte for byte.
bool same_directory(const std::filesystem::path& a, const std::filesystem::path& b, std::string& why) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(a)) names.push_back(e.path().filename().string());
  std::size_t count_b = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(b)) ++count_b;
  if (names.size() != count_b) {
    why = "file lists differ";
    return false;
  }
  for (const auto& n : names) {
    if (n == "manifest.json") continue;
    if (slurp(a / n) != slurp(b / n)) {
      why = n + " differs";
      return false;
    }
  }
  return true;
}

const std::size_t kJobs = default_jobs();

Outcome ac1() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = verify_lemma1_suite(20240601, 20, ExpectationMode::Exhaustive, 0, kJobs);
  const double secs = seconds_since(t0);
  return {r.pass && r.statistic < 1e-10 && secs < 60.0,
          "20 instances, max inf-norm error " + fmt("%.3g", r.statistic) + " (< 1e-10), " + fmt("%.1f", secs) + " s (< 60 s)"};
}

Outcome ac2() {
  const auto t0 = std::chrono::steady_clock::now();
  Lemma2Options opt;
  opt.trials = 10000;
  opt.jobs = kJobs;
  const auto r = verify_lemma2_suite(20240601, 10, opt);
  const double secs = seconds_since(t0);
  std::size_t steps = 0;
  for (const auto& d : r.details) steps += d["details"].size();
  return {r.pass && r.details.size() >= 10 && secs < 300.0,
          "10 configurations, " + std::to_string(steps) + " sync steps, 1e4 trials each; tightest mean+4se " +
              fmt("%.4g", r.statistic) + " <= " + fmt("%.4g", r.bound) + ", " + fmt("%.1f", secs) + " s (< 300 s)"};
}

Outcome ac3() {
  double worst = 0.0;
  std::size_t compared = 0;
  bool same_participants = true;
  for (std::uint64_t inst_seed = 1; inst_seed <= 5; ++inst_seed) {
    QuadraticInstanceSpec spec;
    spec.cycles.assign(2 + inst_seed, 1);
    spec.samples.assign(spec.cycles.size(), 10 + inst_seed);
    spec.local_steps = 1 + static_cast<std::int64_t>(inst_seed % 3);
    spec.dimension = 3;
    spec.batch_size = 3;
    spec.seed = inst_seed;
    const Instance inst = make_quadratic_instance(spec);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      RunConfig cfg;
      cfg.model = inst.model;
      cfg.clients = inst.clients;
      cfg.local_steps = inst.local_steps;
      cfg.total_iterations = 50 * inst.local_steps;
      cfg.lr = inst.lr;
      cfg.batch_size = inst.batch_size;
      cfg.seed = seed;
      cfg.initial_model = inst.initial_model;
      cfg.snapshot_stride = 1;
      cfg.policy = PolicyKind::PaperUniformSlot;
      const auto paper = run(cfg);
      cfg.policy = PolicyKind::FullParticipation;
      const auto fedavg = run(cfg);
      for (std::size_t k = 0; k < paper.logs.size(); ++k) {
        worst = std::max(worst, (*paper.logs[k].snapshot - *fedavg.logs[k].snapshot).lpNorm<Eigen::Infinity>());
        same_participants = same_participants && paper.logs[k].participants == fedavg.logs[k].participants;
        ++compared;
      }
    }
  }
  return {worst <= 1e-12 && same_participants,
          std::to_string(compared) + " sync-step models compared over 5 instances x 3 seeds, max coordinate difference " +
              fmt("%.3g", worst) + " (<= 1e-12)"};
}

Outcome ac4() {
  const auto t0 = std::chrono::steady_clock::now();
  TheoremCheckOptions opt;
  opt.seeds = 10;
  opt.jobs = kJobs;
  const auto out = verify_theorem(default_theorem_instance(), opt);
  const double secs = seconds_since(t0);
  std::string gaps;
  for (std::size_t k = 0; k < out.bounds.size(); ++k) {
    gaps += "K=" + std::to_string(opt.checkpoints[k]) + ": " + fmt("%.3g", out.mean_gaps[k]) + " <= " + fmt("%.3g", out.bounds[k]) + "; ";
  }
  return {out.result.pass && secs < 300.0,
          gaps + "slope " + fmt("%.3f", out.fit.slope) + " in [-1.3, -0.7], " + fmt("%.1f", secs) + " s (< 300 s)"};
}

Outcome ac5() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto shape = run_comparison(*preset("paper-shape"), kJobs);
  const double paper = shape.of(PolicyKind::PaperUniformSlot).final_gap->mean;
  const double b1 = shape.of(PolicyKind::EagerBenchmark1).final_gap->mean;
  const double b2 = shape.of(PolicyKind::WaitForAllBenchmark2).final_gap->mean;
  const auto skew = run_comparison(*preset("optimum-skew"), kJobs);
  const double bias_paper = skew.of(PolicyKind::PaperUniformSlot).bias_score->mean;
  const double bias_b1 = skew.of(PolicyKind::EagerBenchmark1).bias_score->mean;
  const double secs = seconds_since(t0);
  const bool ok = paper < b1 && paper < b2 && bias_b1 > bias_paper && secs < 1800.0;
  return {ok, "paper-shape mean final gap paper " + fmt("%.4g", paper) + " < bench1 " + fmt("%.4g", b1) + ", bench2 " +
                  fmt("%.4g", b2) + "; optimum-skew bias bench1 " + fmt("%.4f", bias_b1) + " > paper " + fmt("%.4f", bias_paper) +
                  ", " + fmt("%.1f", secs) + " s (< 1800 s)"};
}

Outcome ac6() {
  const auto r = verify_schedule_marginals({});
  return {r.pass, "40 clients x 1e4 epochs, every slot frequency within 4 sigma; tightest slack " + fmt("%.3g", r.slack)};
}

Outcome ac7() {
  GradientCheckOptions opt;
  opt.trials_per_kind = 100;
  const auto r = verify_gradients(opt);
  std::string per;
  for (const auto& d : r.details) per += d["model"].get<std::string>() + " " + fmt("%.2g", d["max_relative_error"].get<double>()) + "; ";
  return {r.pass, "100 triples per model kind, max relative error " + per + "(< 1e-5)"};
}

Outcome ac8() {
  const auto root = std::filesystem::temp_directory_path() / "fedenergy_acceptance_determinism";
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  {
    std::ofstream(root / "smoke.json") << R"({"preset": "smoke"})";
    std::ofstream(root / "skew.json") << R"({"preset": "optimum-skew", "total_iterations": 500, "seeds": [1, 2, 3, 4]})";
  }
  const std::vector<std::pair<std::string, std::string>> invocations{
      {"run-smoke", "run --config " + (root / "smoke.json").string() + " --seed 7"},
      {"run-skew", "run --config " + (root / "skew.json").string()},
      {"verify-lemma1", "verify lemma1 --exhaustive"},
      {"verify-lemma1-mc", "verify lemma1 --trials 2000"},
      {"verify-lemma2", "verify lemma2 --trials 500"},
      {"verify-theorem", "verify theorem-bound"},
      {"verify-gradients", "verify gradients"},
      {"verify-marginals", "verify schedule-marginals"},
  };
  for (const auto& [tag, args] : invocations) {
    for (const int jobs : {1, 4}) {
      const auto dir = root / (tag + "_j" + std::to_string(jobs));
      const int code = sim(args + " --jobs " + std::to_string(jobs) + " --out " + dir.string());
      if (code != 0) return {false, tag + " exited with " + std::to_string(code)};
    }
    std::string why;
    if (!same_directory(root / (tag + "_j1"), root / (tag + "_j4"), why)) return {false, tag + ": " + why};
  }
  std::filesystem::remove_all(root);
  return {true, std::to_string(invocations.size()) + " run/verify invocations, --jobs 1 vs 4: all CSV/JSON outputs hash-equal"};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5}, {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %s %s\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
