#pragma once

#include "fedenergy/core.hpp"
#include "fedenergy/data.hpp"
#include "fedenergy/fedtrain.hpp"
#include "fedenergy/models.hpp"
#include "fedenergy/parallel.hpp"
#include "fedenergy/scheduling.hpp"

#include "json.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <array>
#include <optional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace fedenergy {

// ---------------------------------------------------------------------------
// Reports

/// One verification outcome; serializes to
/// {check, instance-config-hash, mode, statistic, bound, slack, pass, details, notes}.
struct CheckResult {
  std::string check;
  std::string mode;
  std::string instance_hash;
  double statistic = 0.0;
  double bound = 0.0;
  double slack = 0.0;
  bool pass = false;
  nlohmann::json details = nlohmann::json::array();
  std::vector<std::string> notes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["check"] = check;
    j["instance-config-hash"] = instance_hash;
    j["mode"] = mode;
    j["statistic"] = statistic;
    j["bound"] = bound;
    j["slack"] = slack;
    j["pass"] = pass;
    j["details"] = details;
    j["notes"] = notes;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Small verification instances

struct Instance {
  LossModel model;
  std::vector<ClientProfile> clients;
  std::int64_t local_steps = 1;
  std::size_t batch_size = 1;
  LearningRateSchedule lr;
  std::uint64_t seed = 0;
  ModelVector initial_model;
  std::int64_t round = 0;   // round at which an expectation is taken
  std::int64_t rounds = 1;  // rounds simulated

  LocalTraining training() const { return {model, local_steps, lr, batch_size}; }

  int max_cycle() const {
    int e = 1;
    for (const auto& c : clients) e = std::max(e, c.cycle);
    return e;
  }

  nlohmann::json describe() const {
    nlohmann::json j;
    j["model"] = to_string(model.kind);
    j["l2"] = model.l2;
    j["dimension"] = model.input_dim;
    j["T"] = local_steps;
    j["batch_size"] = batch_size;
    j["lr"] = {{"kind", to_string(lr.kind)}, {"mu", lr.mu}, {"gamma", lr.gamma}, {"eta", lr.eta}};
    j["seed"] = seed;
    j["round"] = round;
    j["rounds"] = rounds;
    std::vector<int> cycles;
    std::vector<std::size_t> sizes;
    for (const auto& c : clients) {
      cycles.push_back(c.cycle);
      sizes.push_back(c.size());
    }
    j["cycles"] = cycles;
    j["samples"] = sizes;
    return j;
  }

  std::string config_hash() const {
    const std::string text = describe().dump();
    std::uint64_t h = fnv1a(text.data(), text.size());
    for (const auto& c : clients) {
      for (const auto& p : c.data) {
        h = fnv1a(p.features.data(), static_cast<std::size_t>(p.features.size()) * sizeof(double), h);
        h = fnv1a(&p.target, sizeof p.target, h);
      }
    }
    h = fnv1a(initial_model.data(), static_cast<std::size_t>(initial_model.size()) * sizeof(double), h);
    return hex64(h);
  }
};

struct QuadraticInstanceSpec {
  std::vector<int> cycles;
  std::int64_t local_steps = 1;
  Eigen::Index dimension = 2;
  std::vector<std::size_t> samples;  // per client
  double l2 = 0.1;
  double noise = 0.5;
  double optimum_gap = 0.5;  // spread of per-client ground truths
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::int64_t round = 0;
  std::int64_t rounds = 1;
};

/// Per-client regression data around client-specific ground truths, with the
/// theorem-decay schedule eta_t = 2/(mu(gamma+t)), gamma = max(8 kappa, T).
inline Instance make_quadratic_instance(const QuadraticInstanceSpec& spec) {
  if (spec.cycles.empty() || spec.cycles.size() != spec.samples.size()) {
    throw InvalidArgument("make_quadratic_instance: cycles and samples must be non-empty and equally long");
  }
  Instance inst;
  inst.model = LossModel::quadratic(spec.dimension, spec.l2);
  inst.local_steps = spec.local_steps;
  inst.batch_size = spec.batch_size;
  inst.seed = spec.seed;
  inst.round = spec.round;
  inst.rounds = spec.rounds;
  RngStream truth_rng(spec.seed, {Phase::Instance, 0, 0});
  const auto truths = make_group_truths(spec.dimension, static_cast<int>(spec.cycles.size()), spec.optimum_gap, truth_rng);
  for (std::size_t i = 0; i < spec.cycles.size(); ++i) {
    SyntheticSpec s;
    s.task = TaskKind::Regression;
    s.dimension = spec.dimension;
    s.count = spec.samples[i];
    s.noise = spec.noise;
    s.ground_truth = {truths[i]};
    RngStream rng(spec.seed, {Phase::Data, i, 0});
    ClientProfile c;
    c.id = static_cast<int>(i);
    c.cycle = spec.cycles[i];
    c.data = generate_synthetic(s, rng);
    inst.clients.push_back(std::move(c));
  }
  assign_weights(inst.clients);
  std::vector<Dataset> sets;
  for (const auto& c : inst.clients) sets.push_back(c.data);
  const auto est = estimate_constants(inst.model, sets, {}, spec.batch_size);
  const double kappa = est.constants.L / est.constants.mu;
  inst.lr = LearningRateSchedule::theorem_decay(est.constants.mu, std::max(8.0 * kappa, static_cast<double>(spec.local_steps)));
  inst.initial_model = ModelVector::Zero(spec.dimension);
  return inst;
}

/// Global model at the start of `inst.round` under the uniform-slot policy.
inline ModelVector model_at_round(const Instance& inst) {
  if (inst.round == 0) return inst.initial_model;
  RunConfig cfg;
  cfg.model = inst.model;
  cfg.clients = inst.clients;
  cfg.policy = PolicyKind::PaperUniformSlot;
  cfg.local_steps = inst.local_steps;
  cfg.total_iterations = inst.round * inst.local_steps;
  cfg.lr = inst.lr;
  cfg.batch_size = inst.batch_size;
  cfg.seed = inst.seed;
  cfg.allow_ragged_epochs = true;
  cfg.initial_model = inst.initial_model;
  cfg.snapshot_stride = 0;
  return run(cfg).final_model;
}

// ---------------------------------------------------------------------------
// Virtual sequences

struct VirtualSequences {
  ModelVector v_bar;                  // sum_k p_k v_k
  ModelVector w_bar;                  // sum_k p_k w_k; every w_k equals the new global model at a sync step
  ModelVector realized;               // w^(t0+T) from the scheduled updates only
  std::map<int, ModelVector> locals;  // v_k for every client
};

/// w + sum_k p_k (v_k - w), i.e. sum_k p_k v_k written around the round-start model so
/// that full participation with unit cycles reproduces the aggregation bit for bit.
inline ModelVector virtual_average(const ModelVector& w, const std::map<int, ModelVector>& locals, std::span<const double> weights) {
  ModelVector out = w;
  for (const auto& [id, v] : locals) out.noalias() += weights[static_cast<std::size_t>(id)] * (v - w);
  return out;
}

/// All clients train from w for one round with the round's frozen minibatch streams; only
/// `participants` reach the global model.
inline VirtualSequences shadow_round(const LocalTraining& training, std::span<const ClientProfile> clients, const ModelVector& w,
                                     std::int64_t round, const std::vector<int>& participants, std::uint64_t seed) {
  if (!training.model.convex()) throw UnsupportedConfiguration("shadow_round: model is not strongly convex");
  if (training.lr.kind == RateKind::Adam) throw UnsupportedConfiguration("shadow_round: ADAM is not analysed; use SGD");
  std::vector<int> everyone(clients.size());
  for (std::size_t i = 0; i < everyone.size(); ++i) everyone[i] = static_cast<int>(i);
  const auto weights = weights_of(clients);
  RoundOutcome outcome =
      execute_round(training, PolicyKind::PaperUniformSlot, clients, weights, w, round, everyone, participants, seed);
  VirtualSequences vs;
  vs.v_bar = virtual_average(w, outcome.locals, weights);
  vs.realized = outcome.next;
  vs.w_bar = outcome.next;
  vs.locals = std::move(outcome.locals);
  return vs;
}

// ---------------------------------------------------------------------------
// Unbiased scheduling: E[w_bar] = v_bar

enum class ExpectationMode { Exhaustive, MonteCarlo };

inline const char* to_string(ExpectationMode m) { return m == ExpectationMode::Exhaustive ? "exhaustive" : "monte-carlo"; }

inline constexpr std::size_t kMaxExhaustiveSupport = 256;

/// Compares the schedule-randomness expectation of w_bar at `inst.round` with v_bar.
/// Client i trains in round r iff its slot J_i equals r mod E_i; exhaustive mode
/// enumerates every joint (J_1..J_N) with probability prod 1/E_i.
inline CheckResult verify_lemma1(const Instance& inst, ExpectationMode mode, std::size_t trials = 10000) {
  if (!inst.model.convex()) throw UnsupportedConfiguration("lemma1: model is not strongly convex");
  if (inst.lr.kind == RateKind::Adam) throw UnsupportedConfiguration("lemma1: ADAM is not analysed");
  const std::size_t N = inst.clients.size();
  std::size_t support = 1;
  for (const auto& c : inst.clients) {
    support *= static_cast<std::size_t>(c.cycle);
    if (mode == ExpectationMode::Exhaustive && support > kMaxExhaustiveSupport) {
      throw InvalidArgument("lemma1: joint schedule support exceeds " + std::to_string(kMaxExhaustiveSupport) +
                            " outcomes; use Monte Carlo mode");
    }
  }
  const ModelVector w = model_at_round(inst);
  const VirtualSequences vs = shadow_round(inst.training(), inst.clients, w, inst.round, {}, inst.seed);
  const auto weights = weights_of(inst.clients);

  auto realized_for = [&](const std::vector<std::int64_t>& slots) {
    std::map<int, ModelVector> updates;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& c = inst.clients[i];
      if (slots[i] == inst.round % c.cycle) updates.emplace(c.id, make_local_update(c, vs.locals.at(c.id), w));
    }
    return aggregate_paper(w, updates, weights);
  };

  CheckResult r;
  r.check = "lemma1";
  r.mode = to_string(mode);
  r.instance_hash = inst.config_hash();
  ModelVector mean = ModelVector::Zero(w.size());
  if (mode == ExpectationMode::Exhaustive) {
    std::vector<std::int64_t> slots(N, 0);
    const double prob = 1.0 / static_cast<double>(support);
    for (std::size_t k = 0; k < support; ++k) {
      mean.noalias() += prob * realized_for(slots);
      for (std::size_t i = 0; i < N; ++i) {  // mixed-radix increment
        if (++slots[i] < inst.clients[i].cycle) break;
        slots[i] = 0;
      }
    }
    r.statistic = (mean - vs.v_bar).lpNorm<Eigen::Infinity>();
    r.bound = 1e-10;
    r.pass = r.statistic < r.bound;
    r.details.push_back({{"outcomes", support}, {"round", inst.round}, {"inf_norm_error", r.statistic}});
  } else {
    ModelVector sum_sq = ModelVector::Zero(w.size());
    std::vector<std::int64_t> slots(N);
    for (std::size_t k = 0; k < trials; ++k) {
      RngStream rng(inst.seed, {Phase::Trial, k, 0});
      for (std::size_t i = 0; i < N; ++i) slots[i] = draw_uniform_integer(rng, inst.clients[i].cycle);
      const ModelVector x = realized_for(slots);
      mean += x;
      sum_sq += x.cwiseAbs2();
    }
    const double n = static_cast<double>(trials);
    mean /= n;
    const ModelVector var = ((sum_sq / n - mean.cwiseAbs2()) * (n / std::max(1.0, n - 1.0))).cwiseMax(0.0);
    const ModelVector se = (var / n).cwiseSqrt();
    double worst = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      const double allowed = 4.0 * se(k) + 1e-12;
      worst = std::max(worst, std::abs(mean(k) - vs.v_bar(k)) / allowed);
    }
    r.statistic = (mean - vs.v_bar).lpNorm<Eigen::Infinity>();
    r.bound = 4.0 * se.maxCoeff() + 1e-12;
    r.pass = worst <= 1.0;
    r.details.push_back({{"trials", trials}, {"round", inst.round}, {"worst_error_in_4se_units", worst}});
  }
  r.slack = r.bound - r.statistic;
  return r;
}

/// Random small instance: N <= 4, E_i <= 4, T <= 3, quadratic losses.
inline Instance random_lemma1_instance(std::uint64_t seed) {
  RngStream rng(seed, {Phase::Instance, 1, 0});
  QuadraticInstanceSpec spec;
  const int N = 1 + static_cast<int>(rng.uniform_below(4));
  for (int i = 0; i < N; ++i) {
    spec.cycles.push_back(1 + static_cast<int>(rng.uniform_below(4)));
    spec.samples.push_back(3 + rng.uniform_below(8));
  }
  spec.local_steps = 1 + static_cast<std::int64_t>(rng.uniform_below(3));
  spec.dimension = 1 + static_cast<Eigen::Index>(rng.uniform_below(4));
  spec.l2 = 0.05 + 0.5 * rng.uniform01();
  spec.noise = 0.5;
  spec.optimum_gap = 1.0;
  spec.batch_size = 1 + rng.uniform_below(2);
  spec.round = static_cast<std::int64_t>(rng.uniform_below(6));
  spec.seed = seed;
  return make_quadratic_instance(spec);
}

/// Runs `count` random instances and aggregates: passes iff every instance passes.
inline CheckResult verify_lemma1_suite(std::uint64_t seed, std::size_t count, ExpectationMode mode, std::size_t trials, std::size_t jobs) {
  const auto results = parallel_map<CheckResult>(jobs, count, [&](std::size_t k) {
    return verify_lemma1(random_lemma1_instance(derive_seed(seed, k)), mode, trials);
  });
  CheckResult r;
  r.check = "lemma1";
  r.mode = to_string(mode);
  std::uint64_t h = fnv1a(&seed, sizeof seed);
  h = fnv1a(&count, sizeof count, h);
  r.instance_hash = hex64(h);
  r.pass = true;
  r.slack = std::numeric_limits<double>::infinity();
  for (const auto& x : results) {
    r.pass = r.pass && x.pass;
    if (x.slack < r.slack) {
      r.slack = x.slack;
      r.statistic = x.statistic;
      r.bound = x.bound;
    }
    r.details.push_back(x.to_json());
  }
  r.notes.push_back("statistic: infinity-norm |E[w_bar] - v_bar| of the worst instance");
  return r;
}

// ---------------------------------------------------------------------------
// Bounded variance: E||v_bar - w_bar||^2 <= 4 E_max^2 G^2 eta_t^2 T^2

struct Lemma2Options {
  std::size_t trials = 10000;
  std::size_t g2_trials = 200;  // trials whose visited local iterates feed the empirical G^2
  std::size_t jobs = 1;
};

inline CheckResult verify_lemma2(const Instance& inst, const Lemma2Options& opt) {
  if (!inst.model.convex()) throw UnsupportedConfiguration("lemma2: model is not strongly convex");
  if (!inst.lr.satisfies_decay_premise(inst.local_steps)) {
    throw UnsupportedConfiguration(std::string("lemma2: the ") + to_string(inst.lr.kind) +
                                   " schedule violates the decreasing eta_t <= 2 eta_{t+T} premise");
  }
  if (opt.trials < 2) throw InvalidArgument("lemma2: need at least 2 trials");
  const auto R = static_cast<std::size_t>(inst.rounds);
  const auto weights = weights_of(inst.clients);

  struct Trial {
    std::vector<double> sq;
    double g2 = 0.0;
  };
  const auto trials = parallel_map<Trial>(opt.jobs, opt.trials, [&](std::size_t k) {
    Trial out;
    out.sq.reserve(R);
    RunConfig cfg;
    cfg.model = inst.model;
    cfg.clients = inst.clients;
    cfg.policy = PolicyKind::PaperUniformSlot;
    cfg.local_steps = inst.local_steps;
    cfg.total_iterations = inst.rounds * inst.local_steps;
    cfg.lr = inst.lr;
    cfg.batch_size = inst.batch_size;
    cfg.seed = derive_seed(inst.seed, k);
    cfg.allow_ragged_epochs = true;
    cfg.initial_model = inst.initial_model;
    cfg.snapshot_stride = 0;
    cfg.shadow = true;
    RunObserver obs;
    obs.on_round = [&](const RoundView& v) {
      out.sq.push_back((virtual_average(v.w_prev, v.locals, weights) - v.w_next).squaredNorm());
    };
    if (k < opt.g2_trials) {
      obs.on_local_step = [&](int client, std::int64_t, const ModelVector& w_local, const ModelVector&) {
        const auto& data = inst.clients[static_cast<std::size_t>(client)].data;
        out.g2 = std::max(out.g2, gradient_moments(inst.model, w_local, data, inst.batch_size).second_moment());
      };
    }
    run(cfg, obs);
    return out;
  });

  double g2 = 0.0;
  for (const auto& t : trials) g2 = std::max(g2, t.g2);
  const double emax = inst.max_cycle();
  const double T = static_cast<double>(inst.local_steps);

  CheckResult r;
  r.check = "lemma2";
  r.mode = "monte-carlo";
  r.instance_hash = inst.config_hash();
  r.pass = true;
  r.slack = std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(opt.trials);
  for (std::size_t round = 0; round < R; ++round) {
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& t : trials) {
      sum += t.sq[round];
      sum_sq += t.sq[round] * t.sq[round];
    }
    const double mean = sum / n;
    const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
    const double se = std::sqrt(var / n);
    // eta at the last iteration of the round, the smallest step the round uses.
    const std::int64_t t_last = static_cast<std::int64_t>(round + 1) * inst.local_steps - 1;
    const double eta = inst.lr.rate(t_last);
    const double rhs = 4.0 * emax * emax * g2 * eta * eta * T * T;
    const double lhs = mean + 4.0 * se;
    const bool ok = lhs <= rhs;
    r.pass = r.pass && ok;
    if (rhs - lhs < r.slack) {
      r.slack = rhs - lhs;
      r.statistic = lhs;
      r.bound = rhs;
    }
    r.details.push_back({{"sync_step", static_cast<std::int64_t>(round) * inst.local_steps},
                         {"mean", mean},
                         {"standard_error", se},
                         {"eta", eta},
                         {"bound", rhs},
                         {"pass", ok}});
  }
  r.notes.push_back("G2 empirical: exact minibatch second moment maximized over local iterates of " +
                    std::to_string(std::min(opt.g2_trials, opt.trials)) + " trials; G2 = " + std::to_string(g2));
  r.notes.push_back("statistic: mean + 4 standard errors at the sync step with the least slack");
  return r;
}

/// Random configuration: N <= 8, mixed E_i <= 8, theorem-decay schedule.
inline Instance random_lemma2_instance(std::uint64_t seed) {
  RngStream rng(seed, {Phase::Instance, 2, 0});
  QuadraticInstanceSpec spec;
  const int N = 2 + static_cast<int>(rng.uniform_below(7));
  for (int i = 0; i < N; ++i) {
    spec.cycles.push_back(1 + static_cast<int>(rng.uniform_below(8)));
    spec.samples.push_back(4 + rng.uniform_below(12));
  }
  spec.cycles[rng.uniform_below(static_cast<std::uint64_t>(N))] = 2 + static_cast<int>(rng.uniform_below(7));
  spec.local_steps = 1 + static_cast<std::int64_t>(rng.uniform_below(4));
  spec.dimension = 1 + static_cast<Eigen::Index>(rng.uniform_below(4));
  spec.l2 = 0.05 + 0.5 * rng.uniform01();
  spec.noise = 0.5;
  spec.optimum_gap = 1.0;
  spec.batch_size = 1 + rng.uniform_below(2);
  spec.rounds = 4 + static_cast<std::int64_t>(rng.uniform_below(5));
  spec.seed = seed;
  return make_quadratic_instance(spec);
}

inline CheckResult verify_lemma2_suite(std::uint64_t seed, std::size_t count, const Lemma2Options& opt,
                                       std::optional<LearningRateSchedule> lr_override = std::nullopt) {
  CheckResult r;
  r.check = "lemma2";
  r.mode = "monte-carlo";
  std::uint64_t h = fnv1a(&seed, sizeof seed);
  h = fnv1a(&count, sizeof count, h);
  h = fnv1a(&opt.trials, sizeof opt.trials, h);
  r.instance_hash = hex64(h);
  r.pass = true;
  r.slack = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < count; ++k) {
    Instance inst = random_lemma2_instance(derive_seed(seed, k));
    if (lr_override) inst.lr = *lr_override;
    const CheckResult x = verify_lemma2(inst, opt);
    r.pass = r.pass && x.pass;
    if (x.slack < r.slack) {
      r.slack = x.slack;
      r.statistic = x.statistic;
      r.bound = x.bound;
    }
    r.details.push_back(x.to_json());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Heterogeneity and the convergence bound

/// Gamma = F* - sum_i p_i F_i*.
inline double compute_gamma(const LossModel& model, std::span<const ClientProfile> clients) {
  if (!model.convex()) throw UnsupportedModel("compute_gamma: needs computable optima (quadratic or logistic-l2)");
  const double global = minimum_value(model, pooled(clients));
  double local = 0.0;
  for (const auto& c : clients) local += c.weight * minimum_value(model, c.data);
  return global - local;
}

struct BoundInputs {
  double mu = 1.0;
  double L = 1.0;
  double sigma2 = 0.0;
  double G2 = 0.0;
  double Gamma = 0.0;
  std::int64_t local_steps = 1;  // T
  int max_cycle = 1;             // E_max
  double w0_gap = 0.0;           // ||w0 - w*||^2

  double kappa() const { return L / mu; }
  double gamma() const { return std::max(8.0 * kappa(), static_cast<double>(local_steps)); }
  double eta0() const { return 2.0 / (mu * gamma()); }
  double B() const {
    const double tm1 = static_cast<double>(local_steps - 1);
    return sigma2 + 6.0 * L * Gamma + 8.0 * tm1 * tm1 * G2;
  }
  /// C evaluated with the largest step size, eta_0.
  double C() const {
    const double e = max_cycle, T = static_cast<double>(local_steps), eta = eta0();
    return 4.0 * e * e * T * T * eta * eta * G2;
  }

  void validate() const {
    if (!(mu > 0.0) || !(L >= mu)) throw InvalidArgument("BoundInputs: need 0 < mu <= L");
    if (sigma2 < 0.0 || G2 < 0.0 || w0_gap < 0.0) throw InvalidArgument("BoundInputs: negative moment");
    if (Gamma < -1e-10) throw InvalidArgument("BoundInputs: Gamma must be >= 0");
    if (local_steps < 1 || max_cycle < 1) throw InvalidArgument("BoundInputs: T and E_max must be >= 1");
  }
};

/// (2 kappa / (gamma + K)) ((B + C) / mu + 2 L ||w0 - w*||^2)
inline double theorem_bound(const BoundInputs& in, std::int64_t K) {
  if (K <= 0) throw InvalidArgument("theorem_bound: K must be positive");
  in.validate();
  const double gamma_clipped = std::max(0.0, in.Gamma);
  BoundInputs c = in;
  c.Gamma = gamma_clipped;
  return 2.0 * c.kappa() / (c.gamma() + static_cast<double>(K)) * ((c.B() + c.C()) / c.mu + 2.0 * c.L * c.w0_gap);
}

// ---------------------------------------------------------------------------
// Rate fit

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double standard_error = 0.0;
  double ci_low = 0.0;  // 95% Student-t interval
  double ci_high = 0.0;
  std::size_t points = 0;
  double k_min = 0.0, k_max = 0.0;  // fitted window
};

inline constexpr double kMinRateDecades = 1.5;

/// Least-squares slope of log(gap) against log(K) over the upper half (in log K) of the
/// supplied range. The supplied range must span at least 1.5 decades.
inline RateFit rate_fit(std::span<const double> ks, std::span<const double> gaps) {
  if (ks.size() != gaps.size()) throw InvalidArgument("rate_fit: length mismatch");
  if (ks.size() < 3) throw InvalidArgument("rate_fit: insufficient data points");
  const double lo = *std::min_element(ks.begin(), ks.end());
  const double hi = *std::max_element(ks.begin(), ks.end());
  if (!(lo > 0.0) || std::log10(hi / lo) < kMinRateDecades - 1e-12) {
    throw InvalidArgument("rate_fit: insufficient data points (K must span >= 1.5 decades)");
  }
  const double cut = 0.5 * (std::log(lo) + std::log(hi));
  std::vector<double> x, y;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (std::log(ks[i]) < cut) continue;
    if (!(gaps[i] > 0.0)) throw InvalidArgument("rate_fit: optimality gaps must be positive");
    x.push_back(std::log(ks[i]));
    y.push_back(std::log(gaps[i]));
  }
  if (x.size() < 3) throw InvalidArgument("rate_fit: insufficient data points in the tail window");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  RateFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - fit.intercept - fit.slope * x[i];
    sse += e * e;
  }
  fit.points = x.size();
  fit.standard_error = x.size() > 2 ? std::sqrt(sse / (n - 2.0) / sxx) : 0.0;
  const boost::math::students_t dist(n - 2.0);
  const double q = boost::math::quantile(boost::math::complement(dist, 0.025));
  fit.ci_low = fit.slope - q * fit.standard_error;
  fit.ci_high = fit.slope + q * fit.standard_error;
  fit.k_min = std::exp(x.front());
  fit.k_max = std::exp(x.back());
  return fit;
}

/// Seed-averaged optimality gap at every sync step t > 0.
inline std::pair<std::vector<double>, std::vector<double>> mean_gap_curve(const std::vector<std::vector<RoundLog>>& logs_by_seed) {
  if (logs_by_seed.empty()) throw InvalidArgument("mean_gap_curve: no runs");
  const std::size_t rows = logs_by_seed.front().size();
  std::vector<double> ks, gaps;
  for (std::size_t k = 0; k < rows; ++k) {
    const std::int64_t t = logs_by_seed.front()[k].t;
    if (t == 0) continue;
    double sum = 0.0;
    for (const auto& logs : logs_by_seed) {
      if (logs.size() != rows || logs[k].t != t || !logs[k].optimality_gap) {
        throw InvalidArgument("mean_gap_curve: runs disagree on sync steps or lack optimality gaps");
      }
      sum += *logs[k].optimality_gap;
    }
    ks.push_back(static_cast<double>(t));
    gaps.push_back(sum / static_cast<double>(logs_by_seed.size()));
  }
  return {ks, gaps};
}

inline RateFit rate_fit(const std::vector<std::vector<RoundLog>>& logs_by_seed) {
  if (logs_by_seed.size() < 5) throw InvalidArgument("rate_fit: need >= 5 seeds");
  const auto [ks, gaps] = mean_gap_curve(logs_by_seed);
  return rate_fit(ks, gaps);
}

// ---------------------------------------------------------------------------
// Convergence-bound check

struct TheoremCheckOptions {
  std::size_t seeds = 10;
  std::vector<std::int64_t> checkpoints{100, 300, 1000};
  double slope_low = -1.3;
  double slope_high = -0.7;
  std::size_t jobs = 1;
};

/// Default instance for the convergence check: heterogeneous quadratic clients with
/// cycles dividing K/T at every checkpoint.
inline Instance default_theorem_instance(std::uint64_t seed = 2024) {
  QuadraticInstanceSpec spec;
  spec.cycles = {1, 2, 4, 5, 1, 2, 4, 5};
  spec.samples.assign(spec.cycles.size(), 40);
  spec.local_steps = 5;
  spec.dimension = 4;
  spec.l2 = 1.0;
  spec.noise = 1.0;
  spec.optimum_gap = 1.0;
  spec.batch_size = 1;
  spec.seed = seed;
  return make_quadratic_instance(spec);
}

struct TheoremCheckOutput {
  CheckResult result;
  BoundInputs inputs;
  RateFit fit;
  std::vector<double> mean_gaps;  // at the checkpoints
  std::vector<double> bounds;
};

inline TheoremCheckOutput verify_theorem(const Instance& inst, const TheoremCheckOptions& opt) {
  if (inst.model.kind != ModelKind::Quadratic) throw UnsupportedConfiguration("theorem-bound: quadratic instances only");
  if (inst.lr.kind != RateKind::TheoremDecay) throw UnsupportedConfiguration("theorem-bound: needs the theorem-decay schedule");
  if (opt.checkpoints.empty()) throw InvalidArgument("theorem-bound: no checkpoints");
  const std::int64_t K = *std::max_element(opt.checkpoints.begin(), opt.checkpoints.end());

  const Dataset all = pooled(inst.clients);
  const ModelVector w_star = closed_form_optimum(inst.model, all);
  const double f_star = global_loss(inst.model, w_star, inst.clients);

  struct SeedRun {
    std::vector<RoundLog> logs;
    double g2 = 0.0;
    double sigma2 = 0.0;
  };
  const auto runs = parallel_map<SeedRun>(opt.jobs, opt.seeds, [&](std::size_t s) {
    SeedRun out;
    RunConfig cfg;
    cfg.model = inst.model;
    cfg.clients = inst.clients;
    cfg.policy = PolicyKind::PaperUniformSlot;
    cfg.local_steps = inst.local_steps;
    cfg.total_iterations = K;
    cfg.lr = inst.lr;
    cfg.batch_size = inst.batch_size;
    cfg.seed = derive_seed(inst.seed, s);
    cfg.initial_model = inst.initial_model;
    cfg.optimal_loss = f_star;
    cfg.snapshot_stride = 0;
    cfg.shadow = true;  // visits every client's local iterates; the realized trajectory is unchanged
    RunObserver obs;
    obs.on_local_step = [&](int client, std::int64_t, const ModelVector& w_local, const ModelVector& w_start) {
      const auto& data = inst.clients[static_cast<std::size_t>(client)].data;
      out.g2 = std::max(out.g2, gradient_moments(inst.model, w_local, data, inst.batch_size).second_moment());
      out.sigma2 = std::max(out.sigma2, round_start_variance(inst.model, w_local, w_start, data, inst.batch_size));
    };
    out.logs = run(cfg, obs).logs;
    return out;
  });

  std::vector<Dataset> sets;
  for (const auto& c : inst.clients) sets.push_back(c.data);
  const std::vector<ModelVector> anchors{inst.initial_model, w_star};
  const ConstantsEstimate est = estimate_constants(inst.model, sets, anchors, inst.batch_size);

  TheoremCheckOutput out;
  BoundInputs& in = out.inputs;
  in.mu = est.constants.mu;
  in.L = est.constants.L;
  in.sigma2 = est.constants.sigma2;
  in.G2 = est.constants.G2;
  for (const auto& r : runs) {
    in.sigma2 = std::max(in.sigma2, r.sigma2);
    in.G2 = std::max(in.G2, r.g2);
  }
  in.Gamma = compute_gamma(inst.model, inst.clients);
  in.local_steps = inst.local_steps;
  in.max_cycle = inst.max_cycle();
  in.w0_gap = (inst.initial_model - w_star).squaredNorm();

  std::vector<std::vector<RoundLog>> logs;
  for (const auto& r : runs) logs.push_back(r.logs);
  out.fit = rate_fit(logs);

  CheckResult& res = out.result;
  res.check = "theorem-bound";
  res.mode = "monte-carlo";
  res.instance_hash = inst.config_hash();
  res.pass = true;
  res.slack = std::numeric_limits<double>::infinity();
  const auto [ks, gaps] = mean_gap_curve(logs);
  for (const std::int64_t k : opt.checkpoints) {
    const auto it = std::find(ks.begin(), ks.end(), static_cast<double>(k));
    if (it == ks.end()) throw InvalidArgument("theorem-bound: checkpoint " + std::to_string(k) + " is not a sync step");
    const double gap = gaps[static_cast<std::size_t>(it - ks.begin())];
    const double bound = theorem_bound(in, k);
    out.mean_gaps.push_back(gap);
    out.bounds.push_back(bound);
    const bool ok = gap <= bound;
    res.pass = res.pass && ok;
    if (bound - gap < res.slack) {
      res.slack = bound - gap;
      res.statistic = gap;
      res.bound = bound;
    }
    res.details.push_back({{"K", k}, {"mean_gap", gap}, {"bound", bound}, {"pass", ok}});
  }
  const bool slope_ok = out.fit.slope >= opt.slope_low && out.fit.slope <= opt.slope_high;
  res.pass = res.pass && slope_ok;
  res.details.push_back({{"rate_slope", out.fit.slope},
                         {"ci95", {out.fit.ci_low, out.fit.ci_high}},
                         {"window", {out.fit.k_min, out.fit.k_max}},
                         {"allowed", {opt.slope_low, opt.slope_high}},
                         {"pass", slope_ok}});
  res.details.push_back({{"mu", in.mu},
                         {"L", in.L},
                         {"sigma2", in.sigma2},
                         {"G2", in.G2},
                         {"Gamma", in.Gamma},
                         {"E_max", in.max_cycle},
                         {"T", in.local_steps},
                         {"kappa", in.kappa()},
                         {"gamma", in.gamma()},
                         {"B", in.B()},
                         {"C", in.C()}});
  res.notes.push_back("mu, L analytic; sigma2, G2 empirical (exact minibatch moments over every visited local iterate, " +
                      std::to_string(opt.seeds) + " seeds, plus w0 and w*)");
  res.notes.push_back("sigma2 measures E||g(w_local) - grad F_i(w_round_start)||^2, i.e. against the round-start gradient");
  res.notes.push_back("B = sigma2 + 6 L Gamma + 8 (T-1)^2 G2; C uses eta_0 = 2/(mu gamma)");
  return out;
}

// ---------------------------------------------------------------------------
// Gradient and schedule checks

struct GradientCheckOptions {
  std::size_t trials_per_kind = 100;
  double step = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t seed = 7;
};

namespace detail {

inline ModelVector central_difference(const LossModel& model, const ModelVector& w, std::span<const DataPoint> data, double h) {
  ModelVector g(w.size());
  ModelVector probe = w;
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    probe(k) = w(k) + h;
    const double up = loss(model, probe, data);
    probe(k) = w(k) - h;
    const double down = loss(model, probe, data);
    probe(k) = w(k);
    g(k) = (up - down) / (2.0 * h);
  }
  return g;
}

struct RandomTriple {
  LossModel model;
  ModelVector w;
  Dataset data;
};

inline RandomTriple random_triple(ModelKind kind, std::uint64_t seed, std::size_t trial) {
  RngStream rng(seed, {Phase::Instance, static_cast<std::uint64_t>(kind) + 10, trial});
  const auto d = static_cast<Eigen::Index>(1 + rng.uniform_below(5));
  const double l2 = 0.5 * rng.uniform01();
  RandomTriple out;
  switch (kind) {
    case ModelKind::Quadratic: out.model = LossModel::quadratic(d, l2); break;
    case ModelKind::Logistic: out.model = LossModel::logistic(d, 2 + static_cast<int>(rng.uniform_below(3)), l2); break;
    case ModelKind::TinyMlp: {
      const int classes = std::array<int, 3>{0, 2, 3}[rng.uniform_below(3)];
      out.model = LossModel::tiny_mlp(d, 1 + static_cast<int>(rng.uniform_below(6)), classes, l2);
      break;
    }
  }
  const std::size_t n = 1 + rng.uniform_below(8);
  for (std::size_t j = 0; j < n; ++j) {
    DataPoint p;
    p.features.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) p.features(k) = rng.normal();
    p.target = out.model.classification() ? static_cast<double>(rng.uniform_below(static_cast<std::uint64_t>(out.model.classes)))
                                          : rng.normal();
    out.data.push_back(std::move(p));
  }
  out.w.resize(out.model.parameter_count());
  for (Eigen::Index k = 0; k < out.w.size(); ++k) out.w(k) = rng.normal();
  return out;
}

}  // namespace detail

/// Analytic gradients vs central finite differences on random (model, w, data) triples.
inline CheckResult verify_gradients(const GradientCheckOptions& opt) {
  CheckResult r;
  r.check = "gradients";
  r.mode = "finite-difference";
  std::uint64_t h = fnv1a(&opt.seed, sizeof opt.seed);
  h = fnv1a(&opt.trials_per_kind, sizeof opt.trials_per_kind, h);
  r.instance_hash = hex64(h);
  r.bound = opt.tolerance;
  for (const ModelKind kind : {ModelKind::Quadratic, ModelKind::Logistic, ModelKind::TinyMlp}) {
    double worst = 0.0;
    for (std::size_t k = 0; k < opt.trials_per_kind; ++k) {
      const auto triple = detail::random_triple(kind, opt.seed, k);
      const ModelVector g = full_gradient(triple.model, triple.w, triple.data);
      const ModelVector fd = detail::central_difference(triple.model, triple.w, triple.data, opt.step);
      const double scale = std::max({g.norm(), fd.norm(), 1e-8});
      worst = std::max(worst, (g - fd).norm() / scale);
    }
    r.statistic = std::max(r.statistic, worst);
    r.details.push_back({{"model", to_string(kind)}, {"triples", opt.trials_per_kind}, {"max_relative_error", worst}});
  }
  r.slack = r.bound - r.statistic;
  r.pass = r.statistic < r.bound;
  r.notes.push_back("relative error ||g - g_fd|| / max(||g||, ||g_fd||), central differences with step " + std::to_string(opt.step));
  return r;
}

struct MarginalCheckOptions {
  std::vector<int> cycles;  // empty: 40 clients in groups i mod 4 with cycles (1, 5, 10, 20)
  std::int64_t epochs = 10000;
  std::uint64_t seed = 11;
};

/// For every client and every slot position s in its epoch, the fraction of epochs whose
/// drawn slot equals s must lie within 4 sqrt(p(1-p)/R) of p = 1/E_i.
inline CheckResult verify_schedule_marginals(const MarginalCheckOptions& opt) {
  std::vector<int> cycles = opt.cycles;
  if (cycles.empty()) {
    for (int i = 0; i < 40; ++i) cycles.push_back(std::array<int, 4>{1, 5, 10, 20}[static_cast<std::size_t>(i % 4)]);
  }
  const SchedulePolicy policy(PolicyKind::PaperUniformSlot, cycles, 1, opt.seed);
  CheckResult r;
  r.check = "schedule-marginals";
  r.mode = "monte-carlo";
  std::uint64_t h = fnv1a(cycles.data(), cycles.size() * sizeof(int), fnv1a(&opt.seed, sizeof opt.seed));
  h = fnv1a(&opt.epochs, sizeof opt.epochs, h);
  r.instance_hash = hex64(h);
  r.pass = true;
  r.slack = std::numeric_limits<double>::infinity();
  const double R = static_cast<double>(opt.epochs);
  for (int i = 0; i < static_cast<int>(cycles.size()); ++i) {
    const int E = cycles[static_cast<std::size_t>(i)];
    std::vector<std::int64_t> counts(static_cast<std::size_t>(E), 0);
    for (std::int64_t e = 0; e < opt.epochs; ++e) ++counts[static_cast<std::size_t>(policy.slot(i, e))];
    const double p = 1.0 / E;
    const double bound = 4.0 * std::sqrt(p * (1.0 - p) / R);
    double worst = 0.0;
    for (const auto c : counts) worst = std::max(worst, std::abs(static_cast<double>(c) / R - p));
    const bool ok = worst <= bound;
    r.pass = r.pass && ok;
    // E = 1 has a single certain slot; its zero slack says nothing about the sampler.
    if (E > 1 && bound - worst < r.slack) {
      r.slack = bound - worst;
      r.statistic = worst;
      r.bound = bound;
    }
    r.details.push_back({{"client", i}, {"cycle", E}, {"max_deviation", worst}, {"bound", bound}, {"pass", ok}});
  }
  if (std::isinf(r.slack)) r.slack = 0.0;
  r.notes.push_back("per-slot participation frequency over " + std::to_string(opt.epochs) + " energy epochs per client");
  return r;
}

}  // namespace fedenergy
