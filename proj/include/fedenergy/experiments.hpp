#pragma once

#include "fedenergy/core.hpp"
#include "fedenergy/data.hpp"
#include "fedenergy/fedtrain.hpp"
#include "fedenergy/models.hpp"
#include "fedenergy/parallel.hpp"
#include "fedenergy/scheduling.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

namespace fedenergy {

/// Learning rate as configured; theorem-decay constants may be left to the data.
struct RateSpec {
  RateKind kind = RateKind::Constant;
  std::optional<double> mu;     // theorem-decay; default: analytic mu of the training data
  std::optional<double> gamma;  // theorem-decay; default: max(8 kappa, T)
  double eta = 0.05;
  double base = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

enum class OffsetMode { Aligned, Staggered };

struct ExperimentConfig {
  std::string name = "custom";
  LossModel model;
  SyntheticSpec data;     // total samples before the train/test split
  int truth_groups = 1;   // regression: distinct ground truths, point j uses truth j mod G
  double optimum_gap = 0.0;
  double test_fraction = 0.2;
  std::uint64_t data_seed = 1;
  PartitionSpec partition;
  std::vector<PolicyKind> policies{PolicyKind::PaperUniformSlot};
  std::int64_t local_steps = 5;
  std::int64_t total_iterations = 100;
  std::vector<std::uint64_t> seeds{1};
  RateSpec rate;
  std::size_t batch_size = 32;
  bool allow_ragged_epochs = false;
  OffsetMode offsets = OffsetMode::Aligned;
  bool adam_reset_per_round = false;
  int snapshot_stride = 10;
  std::string output_dir = "out";

  /// Throws InvalidArgument whose message starts with the offending key.
  void validate() const {
    auto fail = [](const std::string& key, const std::string& what) { throw InvalidArgument(key + ": " + what); };
    if (policies.empty()) fail("policies", "policy list is empty");
    if (seeds.empty()) fail("seeds", "seed list is empty");
    if (local_steps <= 0) fail("local_steps", "must be positive");
    if (total_iterations <= 0) fail("total_iterations", "must be positive");
    if (total_iterations % local_steps != 0) fail("total_iterations", "K must be a multiple of T");
    if (batch_size == 0) fail("batch_size", "must be >= 1");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) fail("data.test_fraction", "must be in [0, 1)");
    if (truth_groups < 1) fail("data.truth_groups", "must be >= 1");
    if (snapshot_stride < 0) fail("snapshot_stride", "must be >= 0");
    if (data.count == 0) fail("data.samples", "must be positive");
    if (data.dimension != model.input_dim) fail("data.dimension", "does not match the model input dimension");
    for (const auto& g : partition.groups) {
      if (g.cycle <= 0) fail("partition.groups", "energy cycle E_i must be >= 1");
    }
    try {
      partition.validate();
    } catch (const InvalidArgument& e) {
      fail("partition", e.what());
    }
    if (model.classification() != (data.task == TaskKind::Classification)) fail("data.task", "does not match the model kind");
    if (model.classification() && data.classes != model.classes) fail("data.classes", "does not match model.classes");
    if (partition.kind == PartitionKind::OptimumSkew && truth_groups != partition.group_count()) {
      fail("data.truth_groups", "optimum-skew needs one ground truth per client group");
    }
    if (partition.kind == PartitionKind::LabelSkew && !model.classification()) fail("partition.kind", "label-skew needs a classification task");
    if (rate.kind == RateKind::TheoremDecay && !model.convex() && (!rate.mu || !rate.gamma)) {
      fail("learning_rate", "theorem-decay on a non-convex model needs explicit mu and gamma");
    }
    if (!allow_ragged_epochs) {
      for (int i = 0; i < partition.clients; ++i) {
        const std::int64_t epoch = local_steps * partition.cycle_of(i);
        if (total_iterations % epoch != 0) {
          fail("total_iterations", "K/(T*E_i) is not an integer for E_i = " + std::to_string(partition.cycle_of(i)) +
                                       "; set allow_ragged_epochs to truncate the final epoch");
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Presets

inline std::vector<GroupCycle> four_groups(int clients, const std::array<int, 4>& cycles) {
  std::vector<GroupCycle> out;
  for (int k = 0; k < 4; ++k) out.push_back({clients / 4 + (k < clients % 4 ? 1 : 0), cycles[static_cast<std::size_t>(k)]});
  return out;
}

inline std::vector<std::string> preset_names() { return {"paper-shape", "optimum-skew", "smoke", "theorem-check"}; }

inline std::optional<ExperimentConfig> preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  if (name == "paper-shape") {
    // 40 clients in four energy groups; 10-class softmax regression on clustered features.
    c.model = LossModel::logistic(20, 10, 1e-3);
    c.data.task = TaskKind::Classification;
    c.data.dimension = 20;
    c.data.count = 10000;
    c.data.classes = 10;
    c.data.class_separation = 1.0;
    c.data.feature_scale = 1.0;
    c.partition = {PartitionKind::LabelSkew, 40, four_groups(40, {1, 5, 10, 20})};
    c.policies = {PolicyKind::PaperUniformSlot, PolicyKind::EagerBenchmark1, PolicyKind::WaitForAllBenchmark2,
                  PolicyKind::FullParticipation};
    c.local_steps = 5;
    c.total_iterations = 5000;
    c.seeds = {1, 2, 3, 4, 5};
    c.rate.kind = RateKind::TheoremDecay;
    c.rate.mu = 0.01;
    c.rate.gamma = 400.0;
    c.batch_size = 32;
    c.snapshot_stride = 100;
    c.output_dir = "out/paper-shape";
    return c;
  }
  if (name == "optimum-skew") {
    // Each energy group holds data from its own ground truth.
    c.model = LossModel::quadratic(5, 0.0);
    c.data.task = TaskKind::Regression;
    c.data.dimension = 5;
    c.data.count = 4000;
    c.data.noise = 0.5;
    c.truth_groups = 4;
    c.optimum_gap = 2.0;
    c.partition = {PartitionKind::OptimumSkew, 40, four_groups(40, {1, 5, 10, 20})};
    c.policies = {PolicyKind::PaperUniformSlot, PolicyKind::EagerBenchmark1};
    c.local_steps = 5;
    c.total_iterations = 2000;
    c.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    c.rate.kind = RateKind::TheoremDecay;
    c.batch_size = 16;
    c.snapshot_stride = 100;
    c.output_dir = "out/optimum-skew";
    return c;
  }
  if (name == "smoke") {
    c.model = LossModel::quadratic(3, 0.1);
    c.data.task = TaskKind::Regression;
    c.data.dimension = 3;
    c.data.count = 200;
    c.data.noise = 0.3;
    c.truth_groups = 2;
    c.optimum_gap = 1.0;
    c.partition = {PartitionKind::OptimumSkew, 8, {{4, 1}, {4, 2}}};
    c.policies = {PolicyKind::PaperUniformSlot, PolicyKind::EagerBenchmark1, PolicyKind::WaitForAllBenchmark2,
                  PolicyKind::FullParticipation};
    c.local_steps = 2;
    c.total_iterations = 40;
    c.seeds = {1, 2};
    c.rate.kind = RateKind::TheoremDecay;
    c.batch_size = 4;
    c.snapshot_stride = 5;
    c.output_dir = "out/smoke";
    return c;
  }
  if (name == "theorem-check") {
    c.model = LossModel::quadratic(4, 1.0);
    c.data.task = TaskKind::Regression;
    c.data.dimension = 4;
    c.data.count = 400;
    c.data.noise = 1.0;
    c.truth_groups = 4;
    c.optimum_gap = 1.0;
    c.test_fraction = 0.0;
    c.partition = {PartitionKind::OptimumSkew, 8, four_groups(8, {1, 2, 4, 5})};
    c.policies = {PolicyKind::PaperUniformSlot};
    c.local_steps = 5;
    c.total_iterations = 1000;
    c.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    c.rate.kind = RateKind::TheoremDecay;
    c.batch_size = 1;
    c.snapshot_stride = 0;
    c.output_dir = "out/theorem-check";
    return c;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Comparison

struct Prepared {
  std::vector<ClientProfile> clients;
  Dataset test;
  LearningRateSchedule lr;
  std::optional<ModelVector> optimum;  // pooled training optimum, convex models
  std::optional<double> optimal_loss;
  std::vector<ModelVector> group_optima;  // optimum-skew only
};

/// Data, partition, learning rate and optima shared by every policy and seed.
inline Prepared prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  Prepared p;
  SyntheticSpec spec = cfg.data;
  if (spec.task == TaskKind::Regression && spec.ground_truth.empty()) {
    RngStream truth_rng(cfg.data_seed, {Phase::Data, 1, 0});
    spec.ground_truth = make_group_truths(spec.dimension, cfg.truth_groups, cfg.optimum_gap, truth_rng);
  }
  RngStream data_rng(cfg.data_seed, {Phase::Data, 0, 0});
  Dataset all = generate_synthetic(spec, data_rng);
  RngStream split_rng(cfg.data_seed, {Phase::Split, 0, 0});
  auto [train, test] = train_test_split(std::move(all), cfg.test_fraction, split_rng);
  p.test = std::move(test);
  RngStream part_rng(cfg.data_seed, {Phase::Partition, 0, 0});
  p.clients = partition(std::move(train), cfg.partition, part_rng);

  if (cfg.model.convex()) {
    const Dataset everything = pooled(p.clients);
    p.optimum = closed_form_optimum(cfg.model, everything);
    p.optimal_loss = global_loss(cfg.model, *p.optimum, p.clients);
    if (cfg.partition.kind == PartitionKind::OptimumSkew) {
      for (int g = 0; g < cfg.partition.group_count(); ++g) {
        Dataset members;
        for (const auto& c : p.clients) {
          if (cfg.partition.group_of(c.id) == g) members.insert(members.end(), c.data.begin(), c.data.end());
        }
        p.group_optima.push_back(closed_form_optimum(cfg.model, members));
      }
    }
  }

  const RateSpec& r = cfg.rate;
  switch (r.kind) {
    case RateKind::Constant: p.lr = LearningRateSchedule::constant(r.eta); break;
    case RateKind::Adam: p.lr = LearningRateSchedule::adam(r.base, r.beta1, r.beta2, r.epsilon); break;
    case RateKind::TheoremDecay: {
      double mu = r.mu.value_or(0.0), gamma = r.gamma.value_or(0.0);
      if (!r.mu || !r.gamma) {
        std::vector<Dataset> sets;
        for (const auto& c : p.clients) sets.push_back(c.data);
        const auto est = estimate_constants(cfg.model, sets, {}, cfg.batch_size);
        if (!r.mu) mu = est.constants.mu;
        if (!r.gamma) gamma = std::max(8.0 * est.constants.L / mu, static_cast<double>(cfg.local_steps));
      }
      p.lr = LearningRateSchedule::theorem_decay(mu, gamma);
      break;
    }
  }
  return p;
}

inline std::vector<int> staggered_offsets(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<int> out;
  for (int i = 0; i < cfg.partition.clients; ++i) {
    RngStream rng(seed, {Phase::Offset, static_cast<std::uint64_t>(i), 0});
    out.push_back(static_cast<int>(draw_uniform_integer(rng, cfg.partition.cycle_of(i))));
  }
  return out;
}

inline RunConfig make_run_config(const ExperimentConfig& cfg, const Prepared& p, PolicyKind policy, std::uint64_t seed) {
  RunConfig rc;
  rc.model = cfg.model;
  rc.clients = p.clients;
  rc.test = p.test;
  rc.policy = policy;
  rc.local_steps = cfg.local_steps;
  rc.total_iterations = cfg.total_iterations;
  rc.lr = p.lr;
  rc.batch_size = cfg.batch_size;
  rc.seed = seed;
  rc.allow_ragged_epochs = cfg.allow_ragged_epochs;
  if (cfg.offsets == OffsetMode::Staggered) rc.offsets = staggered_offsets(cfg, seed);
  rc.adam_reset_per_round = cfg.adam_reset_per_round;
  RngStream init_rng(cfg.data_seed, {Phase::Init, 0, 0});
  rc.initial_model = ModelVector::Zero(cfg.model.parameter_count());
  if (!cfg.model.convex()) {
    for (Eigen::Index k = 0; k < rc.initial_model.size(); ++k) rc.initial_model(k) = 0.1 * init_rng.normal();
  }
  rc.optimal_loss = p.optimal_loss;
  rc.snapshot_stride = cfg.snapshot_stride;
  return rc;
}

struct BiasReport {
  double pooled_distance = 0.0;
  std::vector<double> group_distances;
  double score = 0.0;  // pooled distance minus the distance to the nearest group optimum
};

inline BiasReport bias_metric(const ModelVector& w, const ModelVector& pooled_opt, std::span<const ModelVector> group_opts) {
  require_same_dimension(w, pooled_opt, "bias_metric");
  if (group_opts.empty()) throw InvalidArgument("bias_metric: no group optima");
  BiasReport r;
  r.pooled_distance = (w - pooled_opt).norm();
  double nearest = std::numeric_limits<double>::infinity();
  for (const auto& g : group_opts) {
    require_same_dimension(w, g, "bias_metric");
    r.group_distances.push_back((w - g).norm());
    nearest = std::min(nearest, r.group_distances.back());
  }
  r.score = r.pooled_distance - nearest;
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (const double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (const double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

struct CurvePoint {
  std::int64_t round = 0;
  std::int64_t t = 0;
  MeanStd loss;
  std::optional<MeanStd> accuracy;
  std::optional<MeanStd> gap;
};

struct PolicySummary {
  PolicyKind policy = PolicyKind::PaperUniformSlot;
  std::vector<RunResult> runs;  // one per seed, in seed order
  std::vector<CurvePoint> curve;
  MeanStd final_loss;
  std::optional<MeanStd> final_accuracy;
  std::optional<MeanStd> final_gap;
  std::optional<MeanStd> bias_score;
  std::vector<BiasReport> bias;  // per seed
  double mean_participations_per_round = 0.0;
};

struct Comparison {
  ExperimentConfig config;
  Prepared prepared;
  std::vector<PolicySummary> policies;

  const PolicySummary& of(PolicyKind k) const {
    for (const auto& p : policies) {
      if (p.policy == k) return p;
    }
    throw InvalidArgument(std::string("comparison has no policy ") + to_string(k));
  }
};

inline std::vector<CurvePoint> summarize_curve(const std::vector<RunResult>& runs, std::int64_t T) {
  std::vector<CurvePoint> out;
  const std::size_t rows = runs.front().logs.size();
  for (std::size_t k = 0; k < rows; ++k) {
    CurvePoint pt;
    pt.t = runs.front().logs[k].t;
    pt.round = pt.t / T;
    std::vector<double> loss, acc, gap;
    for (const auto& r : runs) {
      const auto& log = r.logs[k];
      loss.push_back(log.global_loss);
      if (log.accuracy) acc.push_back(*log.accuracy);
      if (log.optimality_gap) gap.push_back(*log.optimality_gap);
    }
    pt.loss = mean_std(loss);
    if (acc.size() == runs.size()) pt.accuracy = mean_std(acc);
    if (gap.size() == runs.size()) pt.gap = mean_std(gap);
    out.push_back(pt);
  }
  return out;
}

/// Runs every policy on every seed with identical data, initialization and minibatch
/// streams; fan-out over (policy, seed) with results merged in index order.
inline Comparison run_comparison(const ExperimentConfig& cfg, std::size_t jobs = 1) {
  Comparison cmp;
  cmp.config = cfg;
  cmp.prepared = prepare(cfg);
  const std::size_t P = cfg.policies.size(), S = cfg.seeds.size();
  auto results = parallel_map<RunResult>(jobs, P * S, [&](std::size_t k) {
    return run(make_run_config(cfg, cmp.prepared, cfg.policies[k / S], cfg.seeds[k % S]));
  });
  for (std::size_t p = 0; p < P; ++p) {
    PolicySummary s;
    s.policy = cfg.policies[p];
    for (std::size_t k = 0; k < S; ++k) s.runs.push_back(std::move(results[p * S + k]));
    s.curve = summarize_curve(s.runs, cfg.local_steps);
    const CurvePoint& last = s.curve.back();
    s.final_loss = last.loss;
    s.final_accuracy = last.accuracy;
    s.final_gap = last.gap;
    double total = 0.0;
    for (const auto& r : s.runs) {
      for (int i = 0; i < r.participation.clients(); ++i) total += static_cast<double>(r.participation.count(i));
    }
    s.mean_participations_per_round =
        total / static_cast<double>(S) / static_cast<double>(cfg.total_iterations / cfg.local_steps);
    if (cmp.prepared.optimum && !cmp.prepared.group_optima.empty()) {
      std::vector<double> scores;
      for (const auto& r : s.runs) {
        s.bias.push_back(bias_metric(r.final_model, *cmp.prepared.optimum, cmp.prepared.group_optima));
        scores.push_back(s.bias.back().score);
      }
      s.bias_score = mean_std(scores);
    }
    cmp.policies.push_back(std::move(s));
  }
  return cmp;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string fmt_double(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

inline nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline nlohmann::json summary_json(const Comparison& cmp) {
  nlohmann::json j;
  j["name"] = cmp.config.name;
  j["seeds"] = cmp.config.seeds;
  j["K"] = cmp.config.total_iterations;
  j["T"] = cmp.config.local_steps;
  j["learning_rate"] = {{"kind", to_string(cmp.prepared.lr.kind)},
                        {"mu", cmp.prepared.lr.mu},
                        {"gamma", cmp.prepared.lr.gamma},
                        {"eta", cmp.prepared.lr.eta},
                        {"base", cmp.prepared.lr.base}};
  if (cmp.prepared.optimal_loss) j["optimal_loss"] = *cmp.prepared.optimal_loss;
  j["split"] = {{"test_fraction", cmp.config.test_fraction}, {"seed", cmp.config.data_seed}};
  nlohmann::json table = nlohmann::json::array();
  for (const auto& s : cmp.policies) {
    nlohmann::json row;
    row["policy"] = to_string(s.policy);
    row["final_loss"] = detail::mean_std_json(s.final_loss);
    row["final_accuracy"] = s.final_accuracy ? detail::mean_std_json(*s.final_accuracy) : nlohmann::json(nullptr);
    row["final_optimality_gap"] = s.final_gap ? detail::mean_std_json(*s.final_gap) : nlohmann::json(nullptr);
    row["mean_participants_per_round"] = s.mean_participations_per_round;
    if (s.bias_score) {
      row["bias_score"] = detail::mean_std_json(*s.bias_score);
      nlohmann::json per_seed = nlohmann::json::array();
      for (const auto& b : s.bias) {
        per_seed.push_back({{"pooled_distance", b.pooled_distance}, {"group_distances", b.group_distances}, {"score", b.score}});
      }
      row["bias"] = per_seed;
    }
    std::vector<std::string> hashes;
    for (const auto& r : s.runs) hashes.push_back(hex64(hash_model(r.final_model)));
    row["final_model_hashes"] = hashes;
    table.push_back(row);
  }
  j["table"] = table;
  return j;
}

/// Writes curves, per-run logs, participation tables, final models, summary.json and a
/// gnuplot data file into `dir`; returns the written file names.
inline std::vector<std::string> write_outputs(const Comparison& cmp, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  auto put = [&](const std::string& name, const std::string& text) {
    detail::write_text(dir / name, text);
    files.push_back(name);
  };
  for (const auto& s : cmp.policies) {
    const std::string pname = to_string(s.policy);
    std::ostringstream curve;
    curve << "round,t,loss_mean,loss_std,accuracy_mean,accuracy_std,gap_mean,gap_std\n";
    for (const auto& pt : s.curve) {
      curve << pt.round << ',' << pt.t << ',' << detail::fmt_double(pt.loss.mean) << ',' << detail::fmt_double(pt.loss.std) << ',';
      if (pt.accuracy) curve << detail::fmt_double(pt.accuracy->mean) << ',' << detail::fmt_double(pt.accuracy->std);
      else curve << ',';
      curve << ',';
      if (pt.gap) curve << detail::fmt_double(pt.gap->mean) << ',' << detail::fmt_double(pt.gap->std);
      else curve << ',';
      curve << '\n';
    }
    put("curve_" + pname + ".csv", curve.str());
    for (std::size_t k = 0; k < s.runs.size(); ++k) {
      const std::string tag = pname + "_seed" + std::to_string(cmp.config.seeds[k]);
      std::ostringstream rounds, table, model;
      write_round_csv(rounds, s.policy, s.runs[k].logs);
      put("rounds_" + tag + ".csv", rounds.str());
      s.runs[k].participation.write_csv(table);
      put("participation_" + tag + ".csv", table.str());
      write_model(model, s.runs[k].final_model, cmp.config.seeds[k]);
      put("model_" + tag + ".txt", model.str());
    }
  }
  // gnuplot: one block per policy, separated by two blank lines (select with `index`).
  std::ostringstream dat;
  dat << "# columns: round loss_mean loss_std accuracy_mean accuracy_std gap_mean gap_std (NaN when absent)\n";
  for (const auto& s : cmp.policies) {
    dat << "# policy " << to_string(s.policy) << '\n';
    for (const auto& pt : s.curve) {
      auto col = [&](const std::optional<MeanStd>& m) {
        return m ? detail::fmt_double(m->mean) + ' ' + detail::fmt_double(m->std) : std::string("NaN NaN");
      };
      dat << pt.round << ' ' << detail::fmt_double(pt.loss.mean) << ' ' << detail::fmt_double(pt.loss.std) << ' '
          << col(pt.accuracy) << ' ' << col(pt.gap) << '\n';
    }
    dat << "\n\n";
  }
  put("curves.dat", dat.str());
  put("summary.json", summary_json(cmp).dump(2) + "\n");
  return files;
}

}  // namespace fedenergy
