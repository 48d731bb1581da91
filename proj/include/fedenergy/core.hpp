#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fedenergy {

/// Dense parameter vector. Global, local, virtual and optimal models all share this type.
using ModelVector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct UnsupportedModel : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct UnsupportedConfiguration : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RankDeficient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A model became non-finite. `iteration` is the global iteration index t
/// at which the failure was detected.
class DivergedRun : public std::runtime_error {
 public:
  DivergedRun(std::int64_t iteration, const std::string& what)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::int64_t iteration() const noexcept { return iteration_; }

 private:
  std::int64_t iteration_;
};

inline bool all_finite(const ModelVector& v) { return v.allFinite(); }

inline void require_same_dimension(const ModelVector& a, const ModelVector& b, const char* where) {
  if (a.size() != b.size()) {
    throw InvalidArgument(std::string(where) + ": dimension mismatch (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
  }
}

// ---------------------------------------------------------------------------
// Round clock

/// Iteration clock. Synchronization steps are the iterations with t mod T == 0;
/// the global round starting at such a t covers {t, ..., t+T-1}.
struct RoundClock {
  std::int64_t local_steps = 1;       // T
  std::int64_t total_iterations = 0;  // K

  RoundClock() = default;
  RoundClock(std::int64_t T, std::int64_t K) : local_steps(T), total_iterations(K) {
    if (T <= 0) throw InvalidArgument("RoundClock: T must be positive");
    if (K < 0) throw InvalidArgument("RoundClock: K must be nonnegative");
  }

  bool is_sync_step(std::int64_t t) const {
    if (t < 0) throw InvalidArgument("is_sync_step: t must be nonnegative");
    return t % local_steps == 0;
  }

  std::int64_t round_of(std::int64_t t) const { return t / local_steps; }
  std::int64_t round_start(std::int64_t round) const { return round * local_steps; }
  std::int64_t rounds() const { return total_iterations / local_steps; }
};

inline bool is_sync_step(const RoundClock& clock, std::int64_t t) { return clock.is_sync_step(t); }

// ---------------------------------------------------------------------------
// Deterministic random streams

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

/// Purpose of a stream. Values are part of the reproducibility contract; do not renumber.
enum class Phase : std::uint64_t {
  Data = 1,
  Partition = 2,
  Schedule = 3,
  Minibatch = 4,
  Init = 5,
  Split = 6,
  Trial = 7,
  Instance = 8,
  Offset = 9,
};

/// Label of an independent stream derived from a master seed.
struct StreamId {
  Phase phase = Phase::Data;
  std::uint64_t a = 0;  // typically the client id
  std::uint64_t b = 0;  // typically a round or epoch index

  friend bool operator==(const StreamId&, const StreamId&) = default;
};

/// xoshiro256** keyed by (seed, stream id). Identical keys give identical
/// sequences on every platform; the key is hashed so that adding clients or
/// rounds never perturbs another stream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, StreamId id) {
    std::uint64_t key = detail::splitmix64(seed);
    key = detail::splitmix64(key ^ static_cast<std::uint64_t>(id.phase));
    key = detail::splitmix64(key ^ id.a);
    key = detail::splitmix64(key ^ (id.b * 0xd1b54a32d192ed03ULL));
    for (auto& s : state_) {
      key = detail::splitmix64(key);
      s = key;
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer on {0, ..., upper-1} (Lemire's unbiased multiply-shift).
  std::uint64_t uniform_below(std::uint64_t upper) {
    if (upper == 0) throw InvalidArgument("uniform_below: upper must be >= 1");
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * upper;
    auto low = static_cast<std::uint64_t>(m);
    if (low < upper) {
      const std::uint64_t threshold = (0 - upper) % upper;
      while (low < threshold) {
        m = static_cast<__uint128_t>(next_u64()) * upper;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// J uniform on {0, ..., upper-1}.
inline std::int64_t draw_uniform_integer(RngStream& rng, std::int64_t upper) {
  if (upper <= 0) throw InvalidArgument("draw_uniform_integer: upper must be >= 1");
  return static_cast<std::int64_t>(rng.uniform_below(static_cast<std::uint64_t>(upper)));
}

/// Derives a child seed, e.g. one per Monte Carlo trial.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// FNV-1a over bytes; used for config and model hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_model(const ModelVector& w) {
  return fnv1a(w.data(), static_cast<std::size_t>(w.size()) * sizeof(double));
}

inline std::string hex64(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k, h >>= 4) out[static_cast<std::size_t>(k)] = digits[h & 0xf];
  return out;
}

}  // namespace fedenergy
