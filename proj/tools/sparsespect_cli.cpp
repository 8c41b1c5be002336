// Command-line driver for the sparse-view study pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "sparsespect/harness/pipeline.hpp"

using namespace sparsespect;
using namespace sparsespect::harness;

namespace {

void print_summary(const StudyReport& r) {
  std::printf("config %s  seed %llu\n", r.config_hash.substr(0, 12).c_str(), static_cast<unsigned long long>(r.seed));
  std::printf("observer test cases: %d present / %d absent\n", r.n_test_present, r.n_test_absent);
  for (const auto& a : r.arms) {
    std::printf("  %-7s AUC %.4f  (sd %.4f)\n", to_string(a.arm).c_str(), a.auc, std::sqrt(a.variance));
  }
  for (const auto& c : r.comparisons) {
    std::printf("  %s vs %s: dAUC %+.4f  z %+.3f  p %.4g\n", to_string(c.a).c_str(), to_string(c.b).c_str(),
                c.delong.auc_a - c.delong.auc_b, c.delong.z, c.delong.p_two_sided);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view myocardial perfusion SPECT study: simulate, reconstruct, restore, evaluate"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
  std::optional<int> threads;
  RunOptions opt;
  bool quiet = false;
  app.add_option("--config", config_path, "INI configuration file (defaults apply when omitted)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the master seed");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads (results do not depend on this)");
  app.add_flag("--force", opt.force, "Overwrite existing stage output");
  app.add_flag("--resume", opt.resume, "Reuse completed stages and continue partial ones");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  auto* sim = app.add_subcommand("simulate", "Draw phantoms and simulate full/sparse projection counts");
  auto* rec = app.add_subcommand("reconstruct", "OSEM reconstruction and LV-centred crop");
  auto* trn = app.add_subcommand("train", "Train a restoration arm with cross-validation");
  std::string arm_name;
  int fold = -1;
  trn->add_option("--arm", arm_name, "task or tadl")->required()->check(CLI::IsMember({"task", "tadl"}));
  trn->add_option("--fold", fold, "Train one fold only (all folds plus selection when omitted)");
  auto* ev = app.add_subcommand("evaluate", "Restore the evaluation set and run the observer study");
  auto* rep = app.add_subcommand("report", "Verify and print the study report");
  auto* all = app.add_subcommand("study", "Run every stage in order");
  auto* cfg_cmd = app.add_subcommand("config", "Print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  ExperimentConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.n_threads = *threads;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (!quiet) opt.log = [](const std::string& m) { std::cerr << m << std::endl; };
  const Layout layout{out_dir};

  int stage_code = kExitUsage;
  try {
    if (cfg_cmd->parsed()) {
      std::cout << to_ini(cfg);
    } else if (sim->parsed()) {
      stage_code = kExitSimulate;
      run_simulate(cfg, layout, opt);
    } else if (rec->parsed()) {
      stage_code = kExitReconstruct;
      run_reconstruct(cfg, layout, opt);
    } else if (trn->parsed()) {
      stage_code = kExitTrain;
      run_train(cfg, layout, parse_arm(arm_name), fold, opt);
    } else if (ev->parsed()) {
      stage_code = kExitEvaluate;
      print_summary(run_evaluate(cfg, layout, opt));
    } else if (rep->parsed()) {
      stage_code = kExitReport;
      print_summary(load_report(layout));
    } else if (all->parsed()) {
      stage_code = kExitEvaluate;
      print_summary(run_study(cfg, layout, opt));
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return stage_code;
  }
  return kExitOk;
}
