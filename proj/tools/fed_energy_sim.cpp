#include "fedenergy/cli.hpp"

#include "CLI11.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

int main(int argc, char** argv) {
  using namespace fedenergy::cli;
  auto logger = spdlog::stderr_color_mt("fed-energy-sim");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Energy-aware federated learning simulator"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")->capture_default_str();

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "Run an experiment described by a JSON config (comments allowed)");
  run_cmd->add_option("--config", run.config_path, "Config file; see configs/example.jsonc for every key and default")->required();
  run_cmd->add_option("--seed", run.seed, "Replace the seed list with N, N+1, ... (same count)");
  run_cmd->add_option("--jobs", run.jobs, "Worker threads; output does not depend on it")->capture_default_str();
  run_cmd->add_flag("--allow-ragged-epochs", run.allow_ragged_epochs, "Truncate a final energy epoch when K/(T*E_i) is fractional");
  run_cmd->add_option("--out", run.out, "Output directory (overrides output_dir)");

  VerifyOptions verify;
  auto* verify_cmd = app.add_subcommand("verify", "Run a verification check and print its JSON report");
  verify_cmd->add_option("check", verify.check, "lemma1, lemma2, theorem-bound, gradients or schedule-marginals")->required();
  verify_cmd->add_option("--trials", verify.trials,
                         "Monte Carlo trials (lemma1/lemma2, default 10000), seeds (theorem-bound, 10), "
                         "triples per model (gradients, 100) or epochs (schedule-marginals, 10000)");
  verify_cmd->add_flag("--exhaustive", verify.exhaustive, "lemma1: enumerate every joint schedule instead of sampling");
  verify_cmd->add_option("--out", verify.out, "Also write the report and a manifest to this directory");
  verify_cmd->add_option("--jobs", verify.jobs, "Worker threads; output does not depend on it")->capture_default_str();
  verify_cmd->add_option("--seed", verify.seed, "Master seed for instances and trials")->capture_default_str();
  verify_cmd->add_option("--learning-rate", verify.learning_rate, "lemma2: theorem-decay (default), constant or adam");

  auto* presets_cmd = app.add_subcommand("presets", "List or show the shipped experiment presets");
  presets_cmd->require_subcommand(1);
  presets_cmd->add_subcommand("list", "Print preset names");
  std::string preset_name;
  auto* show_cmd = presets_cmd->add_subcommand("show", "Print a preset as a JSON config");
  show_cmd->add_option("name", preset_name)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (*run_cmd) return cmd_run(run);
    if (*verify_cmd) {
      if (std::find(check_names().begin(), check_names().end(), verify.check) == check_names().end()) {
        spdlog::error("config error: check: unknown check '{}'", verify.check);
        return kConfigError;
      }
      return cmd_verify(verify);
    }
    if (*show_cmd) return cmd_presets_show(preset_name);
    return cmd_presets_list();
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternalError;
  }
}
