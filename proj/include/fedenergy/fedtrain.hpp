#pragma once

#include "fedenergy/core.hpp"
#include "fedenergy/data.hpp"
#include "fedenergy/models.hpp"
#include "fedenergy/scheduling.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace fedenergy {

enum class RateKind { TheoremDecay, Constant, Adam };

inline const char* to_string(RateKind kind) {
  switch (kind) {
    case RateKind::TheoremDecay: return "theorem-decay";
    case RateKind::Constant: return "constant";
    case RateKind::Adam: return "adam";
  }
  return "?";
}

/// Step sizes indexed by the global iteration counter t.
struct LearningRateSchedule {
  RateKind kind = RateKind::Constant;
  double mu = 1.0;     // theorem-decay: eta_t = 2 / (mu (gamma + t))
  double gamma = 1.0;
  double eta = 0.01;   // constant
  double base = 1e-3;  // adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static LearningRateSchedule theorem_decay(double mu, double gamma) {
    if (!(mu > 0.0) || !(gamma > 0.0)) throw InvalidArgument("theorem-decay schedule needs mu > 0 and gamma > 0");
    LearningRateSchedule s;
    s.kind = RateKind::TheoremDecay;
    s.mu = mu;
    s.gamma = gamma;
    return s;
  }
  static LearningRateSchedule constant(double eta) {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidArgument("constant schedule needs a finite eta >= 0");
    LearningRateSchedule s;
    s.kind = RateKind::Constant;
    s.eta = eta;
    return s;
  }
  static LearningRateSchedule adam(double base, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) {
    LearningRateSchedule s;
    s.kind = RateKind::Adam;
    s.base = base;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.epsilon = epsilon;
    return s;
  }

  double rate(std::int64_t t) const {
    switch (kind) {
      case RateKind::TheoremDecay: return 2.0 / (mu * (gamma + static_cast<double>(t)));
      case RateKind::Constant: return eta;
      case RateKind::Adam: return base;
    }
    return 0.0;
  }

  /// Decreasing with eta_t <= 2 eta_{t+T}; only the theorem-decay schedule qualifies.
  bool satisfies_decay_premise(std::int64_t local_steps) const {
    if (kind != RateKind::TheoremDecay) return false;
    // 2/(gamma+t) <= 4/(gamma+t+T)  <=>  T <= gamma + t, for all t >= 0.
    return static_cast<double>(local_steps) <= gamma;
  }
};

/// Per-client ADAM moments; persist across participations unless reset.
struct AdamState {
  ModelVector m;
  ModelVector v;
  std::int64_t steps = 0;

  void reset(Eigen::Index dim) {
    m = ModelVector::Zero(dim);
    v = ModelVector::Zero(dim);
    steps = 0;
  }
};

/// Called before every local step with the point where the stochastic gradient is taken.
using LocalStepObserver =
    std::function<void(int client, std::int64_t t, const ModelVector& w_local, const ModelVector& w_round_start)>;

struct LocalTraining {
  LossModel model;
  std::int64_t local_steps = 1;  // T
  LearningRateSchedule lr;
  std::size_t batch_size = 32;
};

/// Runs T local steps from w_global starting at iteration t0 and returns w_i^(t0+T).
/// ADAM schedules use `adam` (a fresh state when null); the others are plain SGD.
inline ModelVector local_train(const LocalTraining& cfg, const ClientProfile& client, const ModelVector& w_global,
                               std::int64_t t0, RngStream& rng, AdamState* adam = nullptr,
                               const LocalStepObserver* observer = nullptr) {
  if (!all_finite(w_global)) throw DivergedRun(t0, "local_train: non-finite starting model");
  ModelVector w = w_global;
  AdamState scratch;
  if (cfg.lr.kind == RateKind::Adam) {
    if (adam == nullptr) adam = &scratch;
    if (adam->m.size() != w.size()) adam->reset(w.size());
  }
  for (std::int64_t j = 0; j < cfg.local_steps; ++j) {
    const std::int64_t t = t0 + j;
    if (observer != nullptr && *observer) (*observer)(client.id, t, w, w_global);
    const MinibatchSample batch = sample_minibatch(client.size(), cfg.batch_size, rng);
    const ModelVector g = stochastic_gradient(cfg.model, w, client.data, batch);
    if (cfg.lr.kind == RateKind::Adam) {
      auto& s = *adam;
      ++s.steps;
      s.m = cfg.lr.beta1 * s.m + (1.0 - cfg.lr.beta1) * g;
      s.v = cfg.lr.beta2 * s.v + (1.0 - cfg.lr.beta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(cfg.lr.beta1, static_cast<double>(s.steps));
      const double c2 = 1.0 - std::pow(cfg.lr.beta2, static_cast<double>(s.steps));
      w.array() -= cfg.lr.base * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + cfg.lr.epsilon);
    } else {
      w.noalias() -= cfg.lr.rate(t) * g;
    }
    if (!all_finite(w)) throw DivergedRun(t, "local_train: client " + std::to_string(client.id) + " diverged");
  }
  return w;
}

/// g_i = E_i (w_i - w).
inline ModelVector make_local_update(const ClientProfile& client, const ModelVector& w_local_final,
                                     const ModelVector& w_round_start) {
  require_same_dimension(w_local_final, w_round_start, "make_local_update");
  return static_cast<double>(client.cycle) * (w_local_final - w_round_start);
}

/// w + sum_{i in S} p_i g_i, summed in ascending client id.
inline ModelVector aggregate_paper(const ModelVector& w_prev, const std::map<int, ModelVector>& updates,
                                   std::span<const double> weights) {
  ModelVector w = w_prev;
  for (const auto& [id, g] : updates) {
    require_same_dimension(w_prev, g, "aggregate_paper");
    if (id < 0 || static_cast<std::size_t>(id) >= weights.size()) throw InvalidArgument("aggregate_paper: unknown client id");
    w.noalias() += weights[static_cast<std::size_t>(id)] * g;
  }
  return w;
}

/// sum_{i in [N]} p_i w_i where absent clients contribute w_prev. An empty
/// participant set returns w_prev bit for bit.
inline ModelVector aggregate_fedavg(const std::map<int, ModelVector>& w_locals, std::span<const double> weights,
                                    const ModelVector& w_prev) {
  if (w_locals.empty()) return w_prev;
  for (const auto& [id, w] : w_locals) {
    require_same_dimension(w_prev, w, "aggregate_fedavg");
    if (id < 0 || static_cast<std::size_t>(id) >= weights.size()) throw InvalidArgument("aggregate_fedavg: unknown client id");
  }
  ModelVector w = ModelVector::Zero(w_prev.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto it = w_locals.find(static_cast<int>(i));
    w.noalias() += weights[i] * (it == w_locals.end() ? w_prev : it->second);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Runs

struct RoundLog {
  std::int64_t t = 0;             // sync step at which the logged global model w^(t) exists
  std::vector<int> participants;  // clients whose updates produced w^(t); empty for t = 0
  double global_loss = 0.0;
  std::optional<double> accuracy;
  std::optional<double> optimality_gap;
  std::uint64_t model_hash = 0;
  std::optional<ModelVector> snapshot;
  double wall_seconds = 0.0;  // not part of the reproducible record

  bool same_record(const RoundLog& o) const {
    return t == o.t && participants == o.participants && global_loss == o.global_loss && accuracy == o.accuracy &&
           optimality_gap == o.optimality_gap && model_hash == o.model_hash && snapshot.has_value() == o.snapshot.has_value() &&
           (!snapshot || *snapshot == *o.snapshot);
  }
};

struct RunConfig {
  LossModel model;
  std::vector<ClientProfile> clients;
  Dataset test;  // accuracy is reported when non-empty and the model classifies
  PolicyKind policy = PolicyKind::PaperUniformSlot;
  std::int64_t local_steps = 5;        // T
  std::int64_t total_iterations = 0;   // K
  LearningRateSchedule lr;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool allow_ragged_epochs = false;
  std::vector<int> offsets;  // per-client energy phase in rounds; empty = aligned at t = 0
  bool adam_reset_per_round = false;
  ModelVector initial_model;
  std::optional<double> optimal_loss;  // F*, enables optimality_gap
  int snapshot_stride = 10;
  bool shadow = false;  // train every client every round; only scheduled updates reach the global model
};

/// One global round as seen by an observer.
struct RoundView {
  std::int64_t round = 0;
  std::int64_t t0 = 0;
  const ModelVector& w_prev;
  const ModelVector& w_next;
  const std::vector<int>& participants;
  const std::map<int, ModelVector>& locals;  // every client in shadow mode, else the participants
};

struct RunObserver {
  std::function<void(const RoundView&)> on_round;
  LocalStepObserver on_local_step;
};

struct RunResult {
  PolicyKind policy = PolicyKind::PaperUniformSlot;
  std::vector<RoundLog> logs;
  ModelVector final_model;
  ParticipationTable participation{0, 0};
};

inline std::vector<int> cycles_of(std::span<const ClientProfile> clients) {
  std::vector<int> out;
  for (const auto& c : clients) out.push_back(c.cycle);
  return out;
}

inline std::vector<double> weights_of(std::span<const ClientProfile> clients) {
  std::vector<double> out;
  for (const auto& c : clients) out.push_back(c.weight);
  return out;
}

/// Rejects configurations that would not run Algorithm-1 semantics exactly.
inline void validate(const RunConfig& cfg) {
  if (cfg.clients.empty()) throw InvalidArgument("run: no clients");
  if (cfg.local_steps <= 0) throw InvalidArgument("run: local_steps must be positive");
  if (cfg.total_iterations <= 0) throw InvalidArgument("run: total_iterations must be positive");
  if (cfg.total_iterations % cfg.local_steps != 0) throw InvalidArgument("run: total_iterations must be a multiple of local_steps");
  if (cfg.batch_size == 0) throw InvalidArgument("run: batch_size must be >= 1");
  if (cfg.initial_model.size() != cfg.model.parameter_count()) throw InvalidArgument("run: initial model has the wrong dimension");
  if (!all_finite(cfg.initial_model)) throw InvalidArgument("run: initial model is not finite");
  double total = 0.0;
  for (std::size_t i = 0; i < cfg.clients.size(); ++i) {
    const auto& c = cfg.clients[i];
    if (c.id != static_cast<int>(i)) throw InvalidArgument("run: client ids must be 0..N-1 in order");
    if (c.cycle < 1) throw InvalidArgument("run: client " + std::to_string(i) + " has energy cycle < 1");
    if (c.data.empty()) throw InvalidArgument("run: client " + std::to_string(i) + " has no data");
    total += c.weight;
    const std::int64_t epoch_len = cfg.local_steps * c.cycle;
    if (!cfg.allow_ragged_epochs && cfg.total_iterations % epoch_len != 0) {
      throw InvalidArgument("run: K/(T*E_i) is not an integer for client " + std::to_string(i) + " (E_i = " +
                            std::to_string(c.cycle) + "); pass allow_ragged_epochs to truncate the final epoch");
    }
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("run: client weights do not sum to 1");
  if (cfg.shadow && cfg.lr.kind == RateKind::Adam) throw UnsupportedConfiguration("run: shadow execution requires SGD");
}

inline RngStream minibatch_stream(std::uint64_t seed, int client, std::int64_t round) {
  return RngStream(seed, {Phase::Minibatch, static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(round)});
}

/// Trains `trainers` (ascending ids) from w and aggregates the `participants` subset with
/// the policy's rule. Shared by real and shadow execution so both are bit-identical.
struct RoundOutcome {
  std::map<int, ModelVector> locals;
  ModelVector next;
};

inline RoundOutcome execute_round(const LocalTraining& training, PolicyKind policy, std::span<const ClientProfile> clients,
                                  std::span<const double> weights, const ModelVector& w, std::int64_t round,
                                  const std::vector<int>& trainers, const std::vector<int>& participants, std::uint64_t seed,
                                  std::vector<AdamState>* adam_states = nullptr, const LocalStepObserver* observer = nullptr) {
  RoundOutcome out;
  const std::int64_t t0 = round * training.local_steps;
  for (const int i : trainers) {
    RngStream rng = minibatch_stream(seed, i, round);
    AdamState* adam = adam_states != nullptr ? &(*adam_states)[static_cast<std::size_t>(i)] : nullptr;
    out.locals.emplace(i, local_train(training, clients[static_cast<std::size_t>(i)], w, t0, rng, adam, observer));
  }
  std::map<int, ModelVector> chosen;
  for (const int i : participants) {
    const auto it = out.locals.find(i);
    if (it == out.locals.end()) throw ContractViolation("execute_round: participant was not trained");
    if (policy == PolicyKind::PaperUniformSlot) {
      chosen.emplace(i, make_local_update(clients[static_cast<std::size_t>(i)], it->second, w));
    } else {
      chosen.emplace(i, it->second);
    }
  }
  out.next = policy == PolicyKind::PaperUniformSlot ? aggregate_paper(w, chosen, weights) : aggregate_fedavg(chosen, weights, w);
  if (!all_finite(out.next)) throw DivergedRun(t0 + training.local_steps, "aggregation produced a non-finite model");
  return out;
}

/// Algorithm loop: broadcast at each sync step, policy-driven participation, local
/// training, policy-specific aggregation, one log row per sync step (t = 0, T, ..., K).
inline RunResult run(const RunConfig& cfg, const RunObserver& observer = {}) {
  validate(cfg);
  const std::int64_t T = cfg.local_steps;
  const std::int64_t rounds = cfg.total_iterations / T;
  const SchedulePolicy policy(cfg.policy, cycles_of(cfg.clients), T, cfg.seed, cfg.offsets);
  const std::vector<double> weights = weights_of(cfg.clients);
  const LocalTraining training{cfg.model, T, cfg.lr, cfg.batch_size};
  const bool with_accuracy = cfg.model.classification() && !cfg.test.empty();

  std::vector<AdamState> adam(cfg.clients.size());
  std::vector<int> everyone(cfg.clients.size());
  for (std::size_t i = 0; i < everyone.size(); ++i) everyone[i] = static_cast<int>(i);

  RunResult result;
  result.policy = cfg.policy;
  result.participation = ParticipationTable(rounds, static_cast<int>(cfg.clients.size()));

  auto make_log = [&](std::int64_t t, std::vector<int> members, const ModelVector& w, const RoundLog* previous) {
    RoundLog log;
    log.t = t;
    log.participants = std::move(members);
    log.model_hash = hash_model(w);
    if (previous != nullptr && previous->model_hash == log.model_hash && log.participants.empty()) {
      log.global_loss = previous->global_loss;
      log.accuracy = previous->accuracy;
      log.optimality_gap = previous->optimality_gap;
    } else {
      log.global_loss = global_loss(cfg.model, w, cfg.clients);
      if (!std::isfinite(log.global_loss)) throw DivergedRun(t, "global loss is not finite");
      if (with_accuracy) log.accuracy = classification_accuracy(cfg.model, w, cfg.test);
      if (cfg.optimal_loss) log.optimality_gap = log.global_loss - *cfg.optimal_loss;
    }
    const std::int64_t sync_index = t / T;
    if (t == cfg.total_iterations || (cfg.snapshot_stride > 0 && sync_index % cfg.snapshot_stride == 0)) log.snapshot = w;
    return log;
  };

  ModelVector w = cfg.initial_model;
  result.logs.reserve(static_cast<std::size_t>(rounds + 1));
  result.logs.push_back(make_log(0, {}, w, nullptr));

  const LocalStepObserver* step_observer = observer.on_local_step ? &observer.on_local_step : nullptr;
  for (std::int64_t r = 0; r < rounds; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const std::int64_t t0 = r * T;
    std::vector<int> members = policy.participants(t0);
    for (const int i : members) result.participation.set(r, i, true);
    if (cfg.adam_reset_per_round) {
      for (auto& s : adam) s = AdamState{};
    }
    const auto& trainers = cfg.shadow ? everyone : members;
    RoundOutcome outcome = execute_round(training, cfg.policy, cfg.clients, weights, w, r, trainers, members, cfg.seed,
                                         cfg.lr.kind == RateKind::Adam ? &adam : nullptr, step_observer);
    if (observer.on_round) observer.on_round(RoundView{r, t0, w, outcome.next, members, outcome.locals});
    w = std::move(outcome.next);
    RoundLog log = make_log(t0 + T, std::move(members), w, &result.logs.back());
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.logs.push_back(std::move(log));
  }
  result.final_model = w;
  return result;
}

inline bool same_trajectory(const RunResult& a, const RunResult& b) {
  if (a.logs.size() != b.logs.size() || a.final_model != b.final_model) return false;
  for (std::size_t k = 0; k < a.logs.size(); ++k) {
    if (!a.logs[k].same_record(b.logs[k])) return false;
  }
  return true;
}

namespace detail {

inline void write_optional(std::ostream& os, const std::optional<double>& v) {
  if (!v) return;
  std::string s;
  append_double(s, *v);
  os << s;
}

}  // namespace detail

/// round_t,policy,participants,global_loss,accuracy,optimality_gap
inline void write_round_csv(std::ostream& os, PolicyKind policy, std::span<const RoundLog> logs) {
  os << "round_t,policy,participants,global_loss,accuracy,optimality_gap\n";
  for (const auto& log : logs) {
    os << log.t << ',' << to_string(policy) << ',';
    for (std::size_t k = 0; k < log.participants.size(); ++k) {
      if (k) os << ';';
      os << log.participants[k];
    }
    os << ',';
    detail::write_optional(os, log.global_loss);
    os << ',';
    detail::write_optional(os, log.accuracy);
    os << ',';
    detail::write_optional(os, log.optimality_gap);
    os << '\n';
  }
}

}  // namespace fedenergy
