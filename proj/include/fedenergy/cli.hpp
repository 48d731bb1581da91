#pragma once

#include "fedenergy/analysis.hpp"
#include "fedenergy/experiments.hpp"

#include "json.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fedenergy::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kInternalError = 1, kConfigError = 2, kDiverged = 3 };

/// A configuration problem; `key` is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config <-> JSON

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so leftovers can be rejected.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return nullptr;
    return &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    out = convert<T>(*v, key_path(key));
  }

  template <typename T>
  void read(const std::string& key, std::optional<T>& out) {
    const json* v = find(key);
    if (v == nullptr || (v->is_string() && v->get<std::string>() == "auto")) {
      if (v != nullptr) out.reset();
      return;
    }
    out = convert<T>(*v, key_path(key));
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError(key_path(k), "unknown key");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<std::int64_t>() < 0) throw ConfigError(where, "must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      return v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline const char* task_name(TaskKind t) { return t == TaskKind::Regression ? "regression" : "classification"; }

inline const char* partition_name(PartitionKind k) {
  switch (k) {
    case PartitionKind::Iid: return "iid";
    case PartitionKind::LabelSkew: return "label-skew";
    case PartitionKind::OptimumSkew: return "optimum-skew";
  }
  return "?";
}

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json("auto"); }

}  // namespace detail

/// Complete, re-parseable description of an experiment.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["model"] = {{"kind", to_string(c.model.kind)}, {"l2", c.model.l2}, {"classes", c.model.classes}, {"hidden", c.model.hidden}};
  j["data"] = {{"task", detail::task_name(c.data.task)},
               {"dimension", c.data.dimension},
               {"samples", c.data.count},
               {"classes", c.data.classes},
               {"class_separation", c.data.class_separation},
               {"feature_scale", c.data.feature_scale},
               {"noise", c.data.noise},
               {"truth_groups", c.truth_groups},
               {"optimum_gap", c.optimum_gap},
               {"test_fraction", c.test_fraction},
               {"seed", c.data_seed}};
  json groups = json::array();
  for (const auto& g : c.partition.groups) groups.push_back({{"size", g.size}, {"cycle", g.cycle}});
  j["partition"] = {{"kind", detail::partition_name(c.partition.kind)}, {"clients", c.partition.clients}, {"groups", groups}};
  std::vector<std::string> policies;
  for (const auto p : c.policies) policies.emplace_back(to_string(p));
  j["policies"] = policies;
  j["local_steps"] = c.local_steps;
  j["total_iterations"] = c.total_iterations;
  j["seeds"] = c.seeds;
  json lr = {{"kind", to_string(c.rate.kind)}};
  switch (c.rate.kind) {
    case RateKind::Constant: lr["eta"] = c.rate.eta; break;
    case RateKind::TheoremDecay:
      lr["mu"] = detail::optional_number(c.rate.mu);
      lr["gamma"] = detail::optional_number(c.rate.gamma);
      break;
    case RateKind::Adam:
      lr["base"] = c.rate.base;
      lr["beta1"] = c.rate.beta1;
      lr["beta2"] = c.rate.beta2;
      lr["epsilon"] = c.rate.epsilon;
      break;
  }
  j["learning_rate"] = lr;
  j["batch_size"] = c.batch_size;
  j["allow_ragged_epochs"] = c.allow_ragged_epochs;
  j["offsets"] = c.offsets == OffsetMode::Aligned ? "aligned" : "staggered";
  j["adam_reset_per_round"] = c.adam_reset_per_round;
  j["snapshot_stride"] = c.snapshot_stride;
  j["output_dir"] = c.output_dir;
  return j;
}

/// Parses a config object. A "preset" key supplies defaults that the other keys override.
inline ExperimentConfig experiment_from_json(const json& input) {
  if (!input.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  json merged = input;
  ExperimentConfig c;
  if (const auto it = input.find("preset"); it != input.end()) {
    if (!it->is_string()) throw ConfigError("preset", "expected a string");
    const auto base = preset(it->get<std::string>());
    if (!base) throw ConfigError("preset", "unknown preset '" + it->get<std::string>() + "'");
    merged = to_json(*base);
    json patch = input;
    patch.erase("preset");
    merged.merge_patch(patch);
  }

  detail::ObjectReader root(merged, "");
  root.read("name", c.name);

  std::string model_kind = "quadratic";
  int classes = 0, hidden = 8;
  double l2 = 0.0;
  if (const json* m = root.find("model")) {
    detail::ObjectReader r(*m, "model");
    r.read("kind", model_kind);
    r.read("l2", l2);
    r.read("classes", classes);
    r.read("hidden", hidden);
    r.finish();
  }

  std::string task = model_kind == "quadratic" ? "regression" : "classification";
  Eigen::Index dimension = 2;
  if (const json* d = root.find("data")) {
    detail::ObjectReader r(*d, "data");
    r.read("task", task);
    r.read("dimension", dimension);
    r.read("samples", c.data.count);
    r.read("classes", c.data.classes);
    r.read("class_separation", c.data.class_separation);
    r.read("feature_scale", c.data.feature_scale);
    r.read("noise", c.data.noise);
    r.read("truth_groups", c.truth_groups);
    r.read("optimum_gap", c.optimum_gap);
    r.read("test_fraction", c.test_fraction);
    r.read("seed", c.data_seed);
    r.finish();
  } else {
    throw ConfigError("data", "missing");
  }
  if (task == "regression") c.data.task = TaskKind::Regression;
  else if (task == "classification") c.data.task = TaskKind::Classification;
  else throw ConfigError("data.task", "expected 'regression' or 'classification'");
  if (dimension <= 0) throw ConfigError("data.dimension", "must be positive");
  c.data.dimension = dimension;
  if (c.data.task == TaskKind::Classification && classes == 0 && model_kind != "quadratic") classes = c.data.classes;

  try {
    if (model_kind == "quadratic") c.model = LossModel::quadratic(dimension, l2);
    else if (model_kind == "logistic-l2" || model_kind == "logistic") c.model = LossModel::logistic(dimension, classes, l2);
    else if (model_kind == "tiny-mlp") c.model = LossModel::tiny_mlp(dimension, hidden, classes, l2);
    else throw ConfigError("model.kind", "expected quadratic, logistic-l2 or tiny-mlp");
  } catch (const InvalidArgument& e) {
    throw ConfigError("model", e.what());
  }

  if (const json* p = root.find("partition")) {
    detail::ObjectReader r(*p, "partition");
    std::string kind = "iid";
    r.read("kind", kind);
    if (kind == "iid") c.partition.kind = PartitionKind::Iid;
    else if (kind == "label-skew") c.partition.kind = PartitionKind::LabelSkew;
    else if (kind == "optimum-skew") c.partition.kind = PartitionKind::OptimumSkew;
    else throw ConfigError("partition.kind", "expected iid, label-skew or optimum-skew");
    r.read("clients", c.partition.clients);
    c.partition.groups.clear();
    if (const json* gs = r.find("groups")) {
      if (!gs->is_array()) throw ConfigError("partition.groups", "expected an array");
      const int G = static_cast<int>(gs->size());
      for (int k = 0; k < G; ++k) {
        const std::string where = "partition.groups[" + std::to_string(k) + "]";
        detail::ObjectReader g((*gs)[static_cast<std::size_t>(k)], where);
        GroupCycle gc;
        gc.size = G > 0 ? c.partition.clients / G + (k < c.partition.clients % G ? 1 : 0) : 0;
        g.read("size", gc.size);
        g.read("cycle", gc.cycle);
        g.finish();
        if (gc.cycle <= 0) throw ConfigError(where + ".cycle", "energy cycle E_i must be >= 1");
        c.partition.groups.push_back(gc);
      }
    }
    r.finish();
  }

  if (const json* ps = root.find("policies")) {
    if (!ps->is_array()) throw ConfigError("policies", "expected an array");
    c.policies.clear();
    for (const auto& p : *ps) {
      if (!p.is_string()) throw ConfigError("policies", "expected policy names");
      const auto kind = parse_policy(p.get<std::string>());
      if (!kind) throw ConfigError("policies", "unknown policy '" + p.get<std::string>() + "'");
      c.policies.push_back(*kind);
    }
  }
  root.read("local_steps", c.local_steps);
  root.read("total_iterations", c.total_iterations);
  if (const json* s = root.find("seeds")) {
    if (!s->is_array()) throw ConfigError("seeds", "expected an array of integers");
    c.seeds.clear();
    for (const auto& v : *s) c.seeds.push_back(detail::ObjectReader::convert<std::uint64_t>(v, "seeds"));
  }
  if (const json* lr = root.find("learning_rate")) {
    detail::ObjectReader r(*lr, "learning_rate");
    std::string kind = "constant";
    r.read("kind", kind);
    if (kind == "constant") c.rate.kind = RateKind::Constant;
    else if (kind == "theorem-decay") c.rate.kind = RateKind::TheoremDecay;
    else if (kind == "adam") c.rate.kind = RateKind::Adam;
    else throw ConfigError("learning_rate.kind", "expected constant, theorem-decay or adam");
    r.read("eta", c.rate.eta);
    r.read("mu", c.rate.mu);
    r.read("gamma", c.rate.gamma);
    r.read("base", c.rate.base);
    r.read("beta1", c.rate.beta1);
    r.read("beta2", c.rate.beta2);
    r.read("epsilon", c.rate.epsilon);
    r.finish();
    if (c.rate.mu && !(*c.rate.mu > 0.0)) throw ConfigError("learning_rate.mu", "must be positive");
    if (c.rate.gamma && !(*c.rate.gamma > 0.0)) throw ConfigError("learning_rate.gamma", "must be positive");
    if (!(c.rate.eta >= 0.0)) throw ConfigError("learning_rate.eta", "must be >= 0");
  }
  root.read("batch_size", c.batch_size);
  root.read("allow_ragged_epochs", c.allow_ragged_epochs);
  std::string offsets = "aligned";
  root.read("offsets", offsets);
  if (offsets == "aligned") c.offsets = OffsetMode::Aligned;
  else if (offsets == "staggered") c.offsets = OffsetMode::Staggered;
  else throw ConfigError("offsets", "expected 'aligned' or 'staggered'");
  root.read("adam_reset_per_round", c.adam_reset_per_round);
  root.read("snapshot_stride", c.snapshot_stride);
  root.read("output_dir", c.output_dir);
  root.finish();

  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.substr(0, msg.find(':')), msg.substr(std::min(msg.size(), msg.find(':') + 2)));
  }
  return c;
}

/// Hash of the canonical (key-sorted) dump; stable under key reordering.
inline std::string config_hash(const json& config) {
  const std::string text = config.dump();
  return hex64(fnv1a(text.data(), text.size()));
}

inline json load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("--config", "cannot open config file " + path.string());
  try {
    return json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", "cannot parse " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes via a temporary file and rename so readers never see a partial manifest.
inline void write_atomically(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << text;
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct RunManifest {
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::string tool_version = kToolVersion;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;
  json command;

  json to_json() const {
    return {{"config_hash", config_hash}, {"master_seed", master_seed}, {"tool_version", tool_version},
            {"started", started},         {"finished", finished},       {"outputs", outputs},
            {"command", command}};
  }
};

// ---------------------------------------------------------------------------
// Commands

struct RunOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = default_jobs();
  bool allow_ragged_epochs = false;
  std::optional<std::string> out;
};

/// Loads, overrides and validates; throws ConfigError.
inline ExperimentConfig resolve_config(const RunOptions& opt) {
  const json raw = load_config_file(opt.config_path);
  ExperimentConfig cfg;
  json patched = raw;
  if (opt.allow_ragged_epochs) patched["allow_ragged_epochs"] = true;
  if (opt.out) patched["output_dir"] = *opt.out;
  if (opt.seed) {
    // Keeps the seed count: N, N+1, ...
    std::size_t count = 1;
    if (const auto it = raw.find("seeds"); it != raw.end() && it->is_array() && !it->empty()) {
      count = it->size();
    } else if (const auto p = raw.find("preset"); p != raw.end() && p->is_string()) {
      if (const auto base = preset(p->get<std::string>())) count = base->seeds.size();
    }
    json seeds = json::array();
    for (std::size_t k = 0; k < count; ++k) seeds.push_back(*opt.seed + k);
    patched["seeds"] = seeds;
  }
  return experiment_from_json(patched);
}

inline int cmd_run(const RunOptions& opt) {
  const auto started = std::chrono::system_clock::now();
  ExperimentConfig cfg;
  try {
    cfg = resolve_config(opt);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  }
  // The output location is not part of the experiment; it stays out of the stored config and its hash.
  json effective = to_json(cfg);
  effective.erase("output_dir");
  const std::filesystem::path dir = cfg.output_dir;
  spdlog::info("run '{}': {} policies x {} seeds, K = {}, T = {}, jobs = {}", cfg.name, cfg.policies.size(), cfg.seeds.size(),
               cfg.total_iterations, cfg.local_steps, opt.jobs);
  try {
    const Comparison cmp = run_comparison(cfg, opt.jobs);
    auto files = write_outputs(cmp, dir);
    write_atomically(dir / "config.json", effective.dump(2) + "\n");
    files.push_back("config.json");
    for (const auto& s : cmp.policies) {
      spdlog::info("{:>7}: final loss {:.6g}{}", to_string(s.policy), s.final_loss.mean,
                   s.final_gap ? fmt::format(", gap {:.6g}", s.final_gap->mean) : std::string());
    }
    RunManifest m;
    m.config_hash = config_hash(effective);
    m.master_seed = cfg.seeds.front();
    m.started = utc_timestamp(started);
    m.finished = utc_timestamp(std::chrono::system_clock::now());
    m.outputs = files;
    m.command = {{"subcommand", "run"}, {"config", "config.json"}};
    write_atomically(dir / "manifest.json", m.to_json().dump(2) + "\n");
    spdlog::info("wrote {} files to {}", files.size() + 1, dir.string());
    return kOk;
  } catch (const DivergedRun& e) {
    spdlog::error("diverged at iteration {}: {}", e.iteration(), e.what());
    return kDiverged;
  } catch (const UnsupportedConfiguration& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternalError;
  }
}

struct VerifyOptions {
  std::string check;
  std::optional<std::size_t> trials;
  bool exhaustive = false;
  std::optional<std::string> out;
  std::size_t jobs = default_jobs();
  std::uint64_t seed = 20240601;
  std::optional<std::string> learning_rate;  // lemma2: override the step-size schedule
};

inline const std::vector<std::string>& check_names() {
  static const std::vector<std::string> names{"lemma1", "lemma2", "theorem-bound", "gradients", "schedule-marginals"};
  return names;
}

inline CheckResult run_check(const VerifyOptions& opt) {
  if (opt.check == "lemma1") {
    const auto mode = opt.exhaustive ? ExpectationMode::Exhaustive : ExpectationMode::MonteCarlo;
    return verify_lemma1_suite(opt.seed, 20, mode, opt.trials.value_or(10000), opt.jobs);
  }
  if (opt.check == "lemma2") {
    Lemma2Options o;
    o.trials = opt.trials.value_or(10000);
    o.jobs = opt.jobs;
    std::optional<LearningRateSchedule> lr;
    if (opt.learning_rate) {
      if (*opt.learning_rate == "constant") lr = LearningRateSchedule::constant(0.05);
      else if (*opt.learning_rate == "adam") lr = LearningRateSchedule::adam(1e-3);
      else if (*opt.learning_rate != "theorem-decay") throw ConfigError("--learning-rate", "expected theorem-decay, constant or adam");
    }
    return verify_lemma2_suite(opt.seed, 10, o, lr);
  }
  if (opt.check == "theorem-bound") {
    TheoremCheckOptions o;
    o.seeds = opt.trials.value_or(10);
    o.jobs = opt.jobs;
    return verify_theorem(default_theorem_instance(), o).result;
  }
  if (opt.check == "gradients") {
    GradientCheckOptions o;
    o.trials_per_kind = opt.trials.value_or(100);
    return verify_gradients(o);
  }
  if (opt.check == "schedule-marginals") {
    MarginalCheckOptions o;
    o.epochs = static_cast<std::int64_t>(opt.trials.value_or(10000));
    o.seed = opt.seed;
    return verify_schedule_marginals(o);
  }
  throw ConfigError("check", "unknown check '" + opt.check + "'");
}

/// Prints the JSON report; exit 0 iff the check passes, 1 when it fails.
inline int cmd_verify(const VerifyOptions& opt, std::ostream& out = std::cout) {
  const auto started = std::chrono::system_clock::now();
  try {
    spdlog::info("verify {} (jobs = {})", opt.check, opt.jobs);
    const CheckResult r = run_check(opt);
    const std::string report = r.to_json().dump(2) + "\n";
    out << report;
    if (opt.out) {
      const std::filesystem::path dir = *opt.out;
      std::filesystem::create_directories(dir);
      const std::string name = "verify_" + opt.check + ".json";
      write_atomically(dir / name, report);
      RunManifest m;
      m.config_hash = r.instance_hash;
      m.master_seed = opt.seed;
      m.started = utc_timestamp(started);
      m.finished = utc_timestamp(std::chrono::system_clock::now());
      m.outputs = {name};
      m.command = {{"subcommand", "verify"}, {"check", opt.check}, {"exhaustive", opt.exhaustive}, {"seed", opt.seed}};
      if (opt.trials) m.command["trials"] = *opt.trials;
      if (opt.learning_rate) m.command["learning_rate"] = *opt.learning_rate;
      write_atomically(dir / "manifest.json", m.to_json().dump(2) + "\n");
    }
    spdlog::info("{}: {}", opt.check, r.pass ? "PASS" : "FAIL");
    return r.pass ? kOk : kInternalError;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const UnsupportedConfiguration& e) {
    spdlog::error("unsupported configuration: {}", e.what());
    return kConfigError;
  } catch (const InvalidArgument& e) {
    spdlog::error("invalid argument: {}", e.what());
    return kConfigError;
  } catch (const DivergedRun& e) {
    spdlog::error("diverged at iteration {}: {}", e.iteration(), e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternalError;
  }
}

inline int cmd_presets_list(std::ostream& out = std::cout) {
  for (const auto& n : preset_names()) out << n << '\n';
  return kOk;
}

inline int cmd_presets_show(const std::string& name, std::ostream& out = std::cout) {
  const auto p = preset(name);
  if (!p) {
    spdlog::error("config error: preset: unknown preset '{}'", name);
    return kConfigError;
  }
  out << to_json(*p).dump(2) << '\n';
  return kOk;
}

}  // namespace fedenergy::cli
