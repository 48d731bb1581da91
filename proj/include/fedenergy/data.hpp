#pragma once

#include "fedenergy/core.hpp"
#include "fedenergy/models.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fedenergy {

struct ClientProfile {
  int id = 0;
  Dataset data;
  double weight = 0.0;  // p_i = D_i / D
  int cycle = 1;        // E_i, global rounds per energy arrival

  std::size_t size() const { return data.size(); }
};

enum class TaskKind { Regression, Classification };

struct SyntheticSpec {
  TaskKind task = TaskKind::Regression;
  Eigen::Index dimension = 1;
  std::size_t count = 0;
  double feature_scale = 1.0;
  // Regression: y = <w_true, x> + noise * N(0,1). With several ground truths,
  // point j is drawn from truth (j mod G) and tagged with that group.
  double noise = 0.0;
  std::vector<ModelVector> ground_truth;
  // Classification: class centers ~ N(0, separation^2 I), x = center + feature_scale * N(0, I).
  int classes = 2;
  double class_separation = 2.0;
};

inline Dataset generate_synthetic(const SyntheticSpec& spec, RngStream& rng) {
  if (spec.count == 0) throw InvalidArgument("generate_synthetic: sample count must be positive");
  if (spec.dimension <= 0) throw InvalidArgument("generate_synthetic: dimension must be positive");
  Dataset out;
  out.reserve(spec.count);
  const Eigen::Index d = spec.dimension;
  auto gaussian_vector = [&](double scale) {
    Eigen::VectorXd v(d);
    for (Eigen::Index k = 0; k < d; ++k) v(k) = scale * rng.normal();
    return v;
  };

  if (spec.task == TaskKind::Regression) {
    if (spec.ground_truth.empty()) throw InvalidArgument("generate_synthetic: regression needs a ground-truth vector");
    for (const auto& w : spec.ground_truth) {
      if (w.size() != d) throw InvalidArgument("generate_synthetic: ground truth dimension mismatch");
    }
    const std::size_t groups = spec.ground_truth.size();
    for (std::size_t j = 0; j < spec.count; ++j) {
      DataPoint p;
      p.features = gaussian_vector(spec.feature_scale);
      const std::size_t g = j % groups;
      p.target = spec.ground_truth[g].dot(p.features) + spec.noise * rng.normal();
      p.group = groups > 1 ? static_cast<int>(g) : -1;
      out.push_back(std::move(p));
    }
    return out;
  }

  if (spec.classes < 2) throw InvalidArgument("generate_synthetic: classification needs >= 2 classes");
  std::vector<Eigen::VectorXd> centers;
  for (int c = 0; c < spec.classes; ++c) centers.push_back(gaussian_vector(spec.class_separation));
  for (std::size_t j = 0; j < spec.count; ++j) {
    const auto label = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(spec.classes)));
    DataPoint p;
    p.features = centers[static_cast<std::size_t>(label)] + gaussian_vector(spec.feature_scale);
    p.target = label;
    out.push_back(std::move(p));
  }
  return out;
}

/// Ground truths base + gap * u_g with base, u_g ~ N(0, I/d); gap = 0 gives identical optima.
inline std::vector<ModelVector> make_group_truths(Eigen::Index d, int groups, double gap, RngStream& rng) {
  if (groups < 1) throw InvalidArgument("make_group_truths: groups must be >= 1");
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  ModelVector base(d);
  for (Eigen::Index k = 0; k < d; ++k) base(k) = s * rng.normal();
  std::vector<ModelVector> truths;
  for (int g = 0; g < groups; ++g) {
    ModelVector u(d);
    for (Eigen::Index k = 0; k < d; ++k) u(k) = s * rng.normal();
    truths.push_back(base + gap * u);
  }
  return truths;
}

template <typename T>
void shuffle_in_place(std::vector<T>& items, RngStream& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_below(i));
    std::swap(items[i - 1], items[j]);
  }
}

inline std::pair<Dataset, Dataset> train_test_split(Dataset data, double test_fraction, RngStream& rng) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw InvalidArgument("train_test_split: fraction must be in [0, 1)");
  shuffle_in_place(data, rng);
  const auto test_count = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(data.size())));
  Dataset test(data.end() - static_cast<std::ptrdiff_t>(test_count), data.end());
  data.resize(data.size() - test_count);
  return {std::move(data), std::move(test)};
}

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionKind { Iid, LabelSkew, OptimumSkew };

struct GroupCycle {
  int size = 0;
  int cycle = 1;  // tau_k
};

/// Clients are grouped by i mod G; group k has energy cycle tau_k.
struct PartitionSpec {
  PartitionKind kind = PartitionKind::Iid;
  int clients = 1;
  std::vector<GroupCycle> groups;  // empty: one group, cycle 1

  int group_count() const { return groups.empty() ? 1 : static_cast<int>(groups.size()); }
  int group_of(int client) const { return client % group_count(); }
  int cycle_of(int client) const { return groups.empty() ? 1 : groups[static_cast<std::size_t>(group_of(client))].cycle; }

  void validate() const {
    if (clients < 1) throw InvalidArgument("partition: client count must be >= 1");
    const int G = group_count();
    if (G > clients) throw InvalidArgument("partition: more groups than clients");
    if (groups.empty()) return;
    int total = 0;
    for (int k = 0; k < G; ++k) {
      const auto& g = groups[static_cast<std::size_t>(k)];
      if (g.cycle < 1) throw InvalidArgument("partition: energy cycles must be >= 1");
      const int expected = clients / G + (k < clients % G ? 1 : 0);
      if (g.size != expected) {
        throw InvalidArgument("partition: group " + std::to_string(k) + " size " + std::to_string(g.size) +
                              " inconsistent with {i : i mod " + std::to_string(G) + " = " + std::to_string(k) +
                              "} (" + std::to_string(expected) + " clients)");
      }
      total += g.size;
    }
    if (total != clients) throw InvalidArgument("partition: group sizes do not sum to the client count");
  }
};

inline void assign_weights(std::vector<ClientProfile>& clients) {
  std::size_t total = 0;
  for (const auto& c : clients) total += c.size();
  if (total == 0) throw InvalidArgument("assign_weights: no data");
  for (auto& c : clients) c.weight = static_cast<double>(c.size()) / static_cast<double>(total);
}

namespace detail {

/// Contiguous even split; the first (n mod parts) parts get one extra item.
template <typename T>
std::vector<std::vector<T>> even_split(std::vector<T> items, std::size_t parts) {
  std::vector<std::vector<T>> out(parts);
  const std::size_t base = items.size() / parts, extra = items.size() % parts;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    out[k].assign(std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(pos)),
                  std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(pos + len)));
    pos += len;
  }
  return out;
}

}  // namespace detail

inline std::vector<ClientProfile> partition(Dataset data, const PartitionSpec& spec, RngStream& rng) {
  spec.validate();
  const auto N = static_cast<std::size_t>(spec.clients);
  if (data.size() < N) throw InvalidArgument("partition: fewer data points than clients");

  std::vector<ClientProfile> clients(N);
  for (std::size_t i = 0; i < N; ++i) {
    clients[i].id = static_cast<int>(i);
    clients[i].cycle = spec.cycle_of(static_cast<int>(i));
  }

  switch (spec.kind) {
    case PartitionKind::Iid:
    case PartitionKind::LabelSkew: {
      shuffle_in_place(data, rng);
      if (spec.kind == PartitionKind::LabelSkew) {
        std::stable_sort(data.begin(), data.end(), [](const DataPoint& a, const DataPoint& b) { return a.target < b.target; });
      }
      auto chunks = detail::even_split(std::move(data), N);
      for (std::size_t i = 0; i < N; ++i) clients[i].data = std::move(chunks[i]);
      break;
    }
    case PartitionKind::OptimumSkew: {
      const int G = spec.group_count();
      std::vector<Dataset> by_group(static_cast<std::size_t>(G));
      for (auto& p : data) {
        if (p.group < 0 || p.group >= G) throw InvalidArgument("partition: optimum-skew needs points tagged with groups 0..G-1");
        by_group[static_cast<std::size_t>(p.group)].push_back(std::move(p));
      }
      for (int k = 0; k < G; ++k) {
        std::vector<std::size_t> members;
        for (std::size_t i = static_cast<std::size_t>(k); i < N; i += static_cast<std::size_t>(G)) members.push_back(i);
        auto& pool = by_group[static_cast<std::size_t>(k)];
        if (pool.size() < members.size()) throw InvalidArgument("partition: a group has fewer points than clients");
        shuffle_in_place(pool, rng);
        auto chunks = detail::even_split(std::move(pool), members.size());
        for (std::size_t m = 0; m < members.size(); ++m) clients[members[m]].data = std::move(chunks[m]);
      }
      break;
    }
  }
  assign_weights(clients);
  return clients;
}

inline Dataset pooled(std::span<const ClientProfile> clients) {
  Dataset all;
  for (const auto& c : clients) all.insert(all.end(), c.data.begin(), c.data.end());
  return all;
}

/// F(w) = sum_i p_i F_i(w), summed in client-id order.
inline double global_loss(const LossModel& model, const ModelVector& w, std::span<const ClientProfile> clients) {
  double total = 0.0;
  for (const auto& c : clients) total += c.weight * loss(model, w, c.data);
  return total;
}

// ---------------------------------------------------------------------------
// Flat file format: one JSON header line, then one comma-separated record per line.

struct FlatHeader {
  Eigen::Index dimension = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string kind = "dataset";
};

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("flat file: malformed number '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<double> parse_record(const std::string& line) {
  std::vector<double> values;
  std::size_t start = 0;
  while (start <= line.size()) {
    const std::size_t comma = line.find(',', start);
    const std::size_t end = comma == std::string::npos ? line.size() : comma;
    values.push_back(parse_double(std::string_view(line).substr(start, end - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return values;
}

inline void write_header(std::ostream& os, const FlatHeader& h) {
  nlohmann::json j = {{"dimension", h.dimension}, {"count", h.count}, {"seed", h.seed}};
  if (h.kind != "dataset") j["kind"] = h.kind;
  os << j.dump() << '\n';
}

inline FlatHeader read_header(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("flat file: missing header");
  FlatHeader h;
  try {
    const auto j = nlohmann::json::parse(line);
    h.dimension = j.at("dimension").get<Eigen::Index>();
    h.count = j.at("count").get<std::size_t>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.kind = j.value("kind", std::string("dataset"));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("flat file: bad header: ") + e.what());
  }
  return h;
}

}  // namespace detail

/// Shortest round-trip decimal formatting, so read_flat(write_flat(x)) == x bit for bit.
inline void write_flat(std::ostream& os, std::span<const DataPoint> data, std::uint64_t seed) {
  FlatHeader h;
  h.dimension = data.empty() ? 0 : data.front().features.size();
  h.count = data.size();
  h.seed = seed;
  detail::write_header(os, h);
  std::string line;
  for (const auto& p : data) {
    line.clear();
    for (Eigen::Index k = 0; k < p.features.size(); ++k) {
      detail::append_double(line, p.features(k));
      line.push_back(',');
    }
    detail::append_double(line, p.target);
    line.push_back('\n');
    os << line;
  }
}

inline std::pair<FlatHeader, Dataset> read_flat(std::istream& is) {
  const FlatHeader h = detail::read_header(is);
  Dataset data;
  data.reserve(h.count);
  std::string line;
  while (data.size() < h.count && std::getline(is, line)) {
    const auto values = detail::parse_record(line);
    if (static_cast<Eigen::Index>(values.size()) != h.dimension + 1) throw InvalidArgument("flat file: record width mismatch");
    DataPoint p;
    p.features = Eigen::Map<const Eigen::VectorXd>(values.data(), h.dimension);
    p.target = values.back();
    data.push_back(std::move(p));
  }
  if (data.size() != h.count) throw InvalidArgument("flat file: fewer records than the header count");
  return {h, std::move(data)};
}

/// A model is stored as a single record of `dimension` values with kind "model".
inline void write_model(std::ostream& os, const ModelVector& w, std::uint64_t seed) {
  FlatHeader h{w.size(), 1, seed, "model"};
  detail::write_header(os, h);
  std::string line;
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    if (k) line.push_back(',');
    detail::append_double(line, w(k));
  }
  line.push_back('\n');
  os << line;
}

inline ModelVector read_model(std::istream& is) {
  const FlatHeader h = detail::read_header(is);
  if (h.kind != "model" || h.count != 1) throw InvalidArgument("flat file: not a model file");
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("flat file: missing model record");
  const auto values = detail::parse_record(line);
  if (static_cast<Eigen::Index>(values.size()) != h.dimension) throw InvalidArgument("flat file: model width mismatch");
  return Eigen::Map<const Eigen::VectorXd>(values.data(), h.dimension);
}

}  // namespace fedenergy
