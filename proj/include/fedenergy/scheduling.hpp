#pragma once

#include "fedenergy/core.hpp"
#include "fedenergy/data.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace fedenergy {

enum class PolicyKind {
  PaperUniformSlot,      // energy-aware stochastic slot selection with E_i-scaled updates
  EagerBenchmark1,       // train on every energy arrival
  WaitForAllBenchmark2,  // update only when every client has energy
  FullParticipation,     // unconstrained FedAvg
};

inline const char* to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::PaperUniformSlot: return "paper";
    case PolicyKind::EagerBenchmark1: return "bench1";
    case PolicyKind::WaitForAllBenchmark2: return "bench2";
    case PolicyKind::FullParticipation: return "fedavg";
  }
  return "?";
}

inline std::optional<PolicyKind> parse_policy(std::string_view name) {
  if (name == "paper" || name == "paper-uniform-slot") return PolicyKind::PaperUniformSlot;
  if (name == "bench1" || name == "eager-benchmark1" || name == "eager") return PolicyKind::EagerBenchmark1;
  if (name == "bench2" || name == "wait-for-all-benchmark2" || name == "wait-for-all") return PolicyKind::WaitForAllBenchmark2;
  if (name == "fedavg" || name == "full-participation" || name == "fedavg-unconstrained") return PolicyKind::FullParticipation;
  return std::nullopt;
}

/// Per-round participation decisions.
///
/// Every decision is a pure function of (client id, E_i, offset_i, round, master seed):
/// the uniform-slot policy draws its slot J for (client, epoch) from a stream keyed by exactly
/// those values, so no client's schedule depends on any other client.
///
/// Client i's energy epochs are the windows of E_i global rounds starting at
/// rounds offset_i + k * E_i. With zero offsets (the default) every epoch is aligned
/// to t mod (E_i T) = 0 and all clients have energy at t = 0.
class SchedulePolicy {
 public:
  SchedulePolicy(PolicyKind kind, std::vector<int> cycles, std::int64_t local_steps, std::uint64_t seed,
                 std::vector<int> offsets = {})
      : kind_(kind), cycles_(std::move(cycles)), offsets_(std::move(offsets)), T_(local_steps), seed_(seed) {
    if (T_ <= 0) throw InvalidArgument("SchedulePolicy: T must be positive");
    if (cycles_.empty()) throw InvalidArgument("SchedulePolicy: no clients");
    for (int e : cycles_) {
      if (e < 1) throw InvalidArgument("SchedulePolicy: energy cycles must be >= 1");
    }
    if (offsets_.empty()) offsets_.assign(cycles_.size(), 0);
    if (offsets_.size() != cycles_.size()) throw InvalidArgument("SchedulePolicy: offsets/cycles length mismatch");
    for (std::size_t i = 0; i < cycles_.size(); ++i) {
      if (offsets_[i] < 0 || offsets_[i] >= cycles_[i]) throw InvalidArgument("SchedulePolicy: offset must lie in [0, E_i)");
    }
    max_cycle_ = *std::max_element(cycles_.begin(), cycles_.end());
  }

  PolicyKind kind() const { return kind_; }
  std::size_t clients() const { return cycles_.size(); }
  std::int64_t local_steps() const { return T_; }
  std::uint64_t seed() const { return seed_; }
  int cycle(int client) const { return cycles_.at(static_cast<std::size_t>(client)); }
  int offset(int client) const { return offsets_.at(static_cast<std::size_t>(client)); }
  int max_cycle() const { return max_cycle_; }
  const std::vector<int>& cycles() const { return cycles_; }
  const std::vector<int>& offsets() const { return offsets_; }

  /// Epoch containing `round`, or -1 before the client's first energy arrival.
  std::int64_t epoch_of(int client, std::int64_t round) const {
    const std::int64_t shifted = round - offset(client);
    return shifted < 0 ? -1 : shifted / cycle(client);
  }

  bool is_epoch_boundary(int client, std::int64_t round) const {
    const std::int64_t shifted = round - offset(client);
    return shifted >= 0 && shifted % cycle(client) == 0;
  }

  /// Stream feeding the slot draw of (client, epoch).
  RngStream slot_stream(int client, std::int64_t epoch) const {
    return RngStream(seed_, {Phase::Schedule, static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(epoch)});
  }

  /// Slot J in {0..E_i-1} of the given epoch (uniform-slot policy).
  std::int64_t slot(int client, std::int64_t epoch) const {
    RngStream rng = slot_stream(client, epoch);
    return draw_uniform_integer(rng, cycle(client));
  }

  bool participates(int client, std::int64_t round) const {
    if (round < 0) throw InvalidArgument("participates: negative round");
    switch (kind_) {
      case PolicyKind::FullParticipation: return true;
      case PolicyKind::WaitForAllBenchmark2: return round % max_cycle_ == 0;
      case PolicyKind::EagerBenchmark1: return is_epoch_boundary(client, round);
      case PolicyKind::PaperUniformSlot: {
        const std::int64_t e = epoch_of(client, round);
        if (e < 0) return false;
        const std::int64_t position = round - offset(client) - e * cycle(client);
        return slot(client, e) == position;
      }
    }
    return false;
  }

  /// S_t for a synchronization step t, ascending client ids.
  std::vector<int> participants(std::int64_t t) const {
    if (t < 0 || t % T_ != 0) throw ContractViolation("participants: t = " + std::to_string(t) + " is not a synchronization step");
    const std::int64_t round = t / T_;
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(clients()); ++i) {
      if (participates(i, round)) out.push_back(i);
    }
    return out;
  }

 private:
  PolicyKind kind_;
  std::vector<int> cycles_;
  std::vector<int> offsets_;
  std::int64_t T_;
  std::uint64_t seed_;
  int max_cycle_ = 1;
};

/// Draws the round offset J for the energy epoch that starts at iteration t.
/// The client then trains only in the global round starting at t + J*T.
inline std::int64_t decide_epoch(const SchedulePolicy& policy, const ClientProfile& client, std::int64_t t, RngStream& rng) {
  if (policy.kind() != PolicyKind::PaperUniformSlot) throw ContractViolation("decide_epoch: only the uniform-slot policy draws slots");
  if (client.cycle != policy.cycle(client.id)) throw ContractViolation("decide_epoch: client cycle disagrees with the policy");
  const std::int64_t T = policy.local_steps();
  if (t < 0 || t % T != 0 || !policy.is_epoch_boundary(client.id, t / T)) {
    throw ContractViolation("decide_epoch: t = " + std::to_string(t) + " is not an energy-epoch boundary of client " +
                            std::to_string(client.id));
  }
  return draw_uniform_integer(rng, client.cycle);
}

inline std::vector<int> participants(const SchedulePolicy& policy, std::span<const ClientProfile> clients, std::int64_t t) {
  if (clients.size() != policy.clients()) throw InvalidArgument("participants: client count disagrees with the policy");
  return policy.participants(t);
}

/// I[i][t] at round granularity: rows are global rounds, columns clients.
class ParticipationTable {
 public:
  ParticipationTable(std::int64_t rounds, int clients)
      : rounds_(rounds), clients_(clients), cells_(static_cast<std::size_t>(rounds * clients), 0) {}

  std::int64_t rounds() const { return rounds_; }
  int clients() const { return clients_; }

  bool at(std::int64_t round, int client) const { return cells_[index(round, client)] != 0; }
  void set(std::int64_t round, int client, bool value) { cells_[index(round, client)] = value ? 1 : 0; }

  /// Iteration-level indicator; constant across the T iterations of a round.
  bool at_iteration(std::int64_t t, std::int64_t local_steps, int client) const { return at(t / local_steps, client); }

  std::int64_t count(int client) const {
    std::int64_t n = 0;
    for (std::int64_t r = 0; r < rounds_; ++r) n += at(r, client) ? 1 : 0;
    return n;
  }

  void write_csv(std::ostream& os) const {
    os << "round";
    for (int i = 0; i < clients_; ++i) os << ',' << i;
    os << '\n';
    for (std::int64_t r = 0; r < rounds_; ++r) {
      os << r;
      for (int i = 0; i < clients_; ++i) os << ',' << (at(r, i) ? 1 : 0);
      os << '\n';
    }
  }

 private:
  std::size_t index(std::int64_t round, int client) const {
    if (round < 0 || round >= rounds_ || client < 0 || client >= clients_) throw InvalidArgument("ParticipationTable: index out of range");
    return static_cast<std::size_t>(round * clients_ + client);
  }

  std::int64_t rounds_;
  int clients_;
  std::vector<std::uint8_t> cells_;
};

inline ParticipationTable build_participation_table(const SchedulePolicy& policy, std::int64_t rounds) {
  ParticipationTable table(rounds, static_cast<int>(policy.clients()));
  for (std::int64_t r = 0; r < rounds; ++r) {
    for (int i = 0; i < table.clients(); ++i) table.set(r, i, policy.participates(i, r));
  }
  return table;
}

/// True when no client trains more than once in any of its aligned energy windows.
inline bool energy_feasible(const ParticipationTable& table, const std::vector<int>& cycles, const std::vector<int>& offsets = {}) {
  for (int i = 0; i < table.clients(); ++i) {
    const int E = cycles.at(static_cast<std::size_t>(i));
    const int o = offsets.empty() ? 0 : offsets.at(static_cast<std::size_t>(i));
    // Rounds before the first arrival form their own (energy-less) window.
    int before = 0;
    for (std::int64_t r = 0; r < std::min<std::int64_t>(o, table.rounds()); ++r) before += table.at(r, i) ? 1 : 0;
    if (before > 0) return false;
    for (std::int64_t start = o; start < table.rounds(); start += E) {
      int used = 0;
      for (std::int64_t r = start; r < std::min<std::int64_t>(start + E, table.rounds()); ++r) used += table.at(r, i) ? 1 : 0;
      if (used > 1) return false;
    }
  }
  return true;
}

}  // namespace fedenergy
