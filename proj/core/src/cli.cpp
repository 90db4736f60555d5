#include "widthlab/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "widthlab/errors.hpp"
#include "widthlab/metrics.hpp"
#include "widthlab/runner.hpp"
#include "widthlab/version.hpp"

namespace widthlab {

namespace fs = std::filesystem;

namespace {

void print_seed_set(const RunConfig& cfg) {
  std::cerr << "seeds:";
  for (int64_t s : cfg.study.seeds) std::cerr << " " << s;
  std::cerr << " (data.seed=" << cfg.data.seed
            << ", continuation_seed=" << cfg.study.continuation_seed << ")\n";
}

RunConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  return RunConfig::from_file(path);
}

TrainState load_parent(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return load_checkpoint_file(path);
}

int cmd_train_parent(const std::string& config_path, const std::string& out_dir) {
  const RunConfig cfg = load_config(config_path);
  print_seed_set(cfg);
  write_provenance(out_dir, cfg.resolved);
  const BuiltData data = build_data(cfg.data, cfg.model);
  for (int64_t seed_value : cfg.study.seeds) {
    const std::string label = "S" + std::to_string(seed_value);
    ParentRun run = train_parent(cfg, seed_value, data, std::cerr);
    const fs::path dir = fs::path(out_dir) / label;
    fs::create_directories(dir);
    for (const auto& [growth, state] : run.snapshots)
      save_checkpoint_file(state, (dir / ("parent_g" + std::to_string(growth) + ".ck")).string());
    save_checkpoint_file(run.final_state, (dir / "parent.ck").string());
    std::ostringstream os;
    os << "step,train_loss,lr\n";
    for (const auto& s : run.log.steps) os << s.step << "," << s.train_loss << "," << s.lr << "\n";
    std::ofstream(dir / "runlog.csv") << os.str();
    std::ostringstream ev;
    ev << "step,val_loss\n";
    for (const auto& e : run.log.evals) ev << e.step << "," << e.val_loss << "\n";
    std::ofstream(dir / "evals.csv") << ev.str();
    std::cerr << "wrote parent checkpoints for " << label << " under " << dir.string() << "\n";
  }
  return 0;
}

int cmd_widen(const std::string& parent_path, const std::string& recipe, int64_t m, uint64_t seed,
              double perturb_sigma, const std::string& out_path) {
  const TrainState parent = load_parent(parent_path);
  std::cerr << "seeds: " << seed << "\n";
  const CandidateState cand = build_candidate(parent, recipe_from_name(recipe), m, seed,
                                              perturb_sigma);
  save_checkpoint_file(cand.state, out_path);
  std::cerr << "wrote " << recipe << " candidate to " << out_path << "\n";
  return 0;
}

int cmd_scan(const std::string& parent_path, const std::string& config_path,
             const std::string& regime, const std::string& seed_label, const std::string& out_dir,
             bool probe_length) {
  const RunConfig cfg = load_config(config_path);
  print_seed_set(cfg);
  const TrainState parent = load_parent(parent_path);
  write_provenance(out_dir, cfg.resolved);
  const BuiltData data = build_data(cfg.data, cfg.model);

  Setting setting;
  setting.seed_label = seed_label;
  setting.growth_step = parent.optim.t;
  setting.regime = regime_from_name(regime);
  setting.horizon = probe_length ? cfg.study.horizons.front() : cfg.study.horizons.back();

  const std::vector<CandidateState> pool =
      build_pool(parent, cfg, cfg.study.seeds.empty() ? 0 : cfg.study.seeds.front());
  const DiagContext diag =
      make_diag_context(parent, data, cfg, mix64(cfg.data.seed, static_cast<uint64_t>(parent.optim.t)));
  std::cerr << "setting " << setting.label() << " over " << pool.size() << " candidates\n";
  const ContinuationReport report = run_setting(pool, setting, data, cfg, diag, probe_length);
  write_report(report, (fs::path(out_dir) / "settings" / setting.dir_name()).string());
  std::cerr << "wrote report for " << setting.label() << "\n";
  return 0;
}

int cmd_study(const std::string& config_path, const std::string& out_dir) {
  const RunConfig cfg = load_config(config_path);
  print_seed_set(cfg);
  const StudyRunResult result = run_study(cfg, out_dir, std::cerr);
  std::cerr << "completed " << result.table.reports.size() << " settings; wrote "
            << result.written_files.size() << " table/figure files\n";
  return 0;
}

int cmd_report(const std::string& study_dir) {
  const fs::path settings = fs::path(study_dir) / "settings";
  if (!fs::exists(settings)) throw ConfigError("no settings store under: " + study_dir);
  const StudyTable table = read_study(settings.string());
  std::set<std::string> labels;
  for (const auto& r : table.reports) labels.insert(r.setting.seed_label);
  std::cerr << "seeds:";
  for (const auto& l : labels) std::cerr << " " << l;
  std::cerr << "\n";
  const std::vector<std::string> written = emit_tables(table, study_dir);
  std::cerr << "rebuilt " << written.size() << " table/figure files from "
            << table.reports.size() << " stored reports\n";
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"widthlab: width-growth candidate selection laboratory"};
  app.set_version_flag("--version", std::string("widthlab ") + kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_dir, parent_path, recipe, regime = "deterministic";
  std::string seed_label = "S0", out_path, study_dir;
  int64_t m = 2;
  uint64_t seed = 0;
  double perturb_sigma = 1e-3;

  CLI::App* train_cmd = app.add_subcommand("train-parent", "train a parent to its checkpoints");
  train_cmd->add_option("--config", config_path, "run configuration file")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* widen_cmd = app.add_subcommand("widen", "build one named candidate checkpoint");
  widen_cmd->add_option("--parent", parent_path, "parent checkpoint")->required();
  widen_cmd->add_option("--recipe", recipe, "candidate recipe name")->required();
  widen_cmd->add_option("--m", m, "width multiplier");
  widen_cmd->add_option("--seed", seed, "candidate seed");
  widen_cmd->add_option("--perturb-sigma", perturb_sigma, "perturbation std");
  widen_cmd->add_option("--out", out_path, "candidate checkpoint path")->required();

  CLI::App* probe_cmd = app.add_subcommand("probe", "short-horizon scan over the pool");
  probe_cmd->add_option("--parent", parent_path, "parent checkpoint")->required();
  probe_cmd->add_option("--config", config_path, "run configuration file")->required();
  probe_cmd->add_option("--regime", regime, "deterministic or stochastic");
  probe_cmd->add_option("--seed-label", seed_label, "setting seed label");
  probe_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* continue_cmd = app.add_subcommand("continue", "long-horizon scan over the pool");
  continue_cmd->add_option("--parent", parent_path, "parent checkpoint")->required();
  continue_cmd->add_option("--config", config_path, "run configuration file")->required();
  continue_cmd->add_option("--regime", regime, "deterministic or stochastic");
  continue_cmd->add_option("--seed-label", seed_label, "setting seed label");
  continue_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* study_cmd = app.add_subcommand("study", "full grid across settings");
  study_cmd->add_option("--config", config_path, "run configuration file")->required();
  study_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* report_cmd = app.add_subcommand("report", "rebuild tables from stored reports");
  report_cmd->add_option("--study", study_dir, "study output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << "widthlab " << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train_parent(config_path, out_dir);
    if (*widen_cmd) return cmd_widen(parent_path, recipe, m, seed, perturb_sigma, out_path);
    if (*probe_cmd) return cmd_scan(parent_path, config_path, regime, seed_label, out_dir, true);
    if (*continue_cmd)
      return cmd_scan(parent_path, config_path, regime, seed_label, out_dir, false);
    if (*study_cmd) return cmd_study(config_path, out_dir);
    if (*report_cmd) return cmd_report(study_dir);
    std::cerr << "usage error: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace widthlab
