#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsespect/harness/config.hpp"
#include "sparsespect/observer.hpp"

namespace sparsespect::harness {

/// Process exit codes of the CLI.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitSimulate = 10,
  kExitReconstruct = 11,
  kExitTrain = 12,
  kExitEvaluate = 13,
  kExitReport = 14,
  kExitRefused = 20,  // output exists and --force was not given
};

class StageError : public std::runtime_error {
 public:
  StageError(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

enum class Arm { full, sparse, tadl, task };
std::string to_string(Arm a);
Arm parse_arm(const std::string& s);
/// The two trained arms.
inline constexpr Arm kTrainedArms[] = {Arm::task, Arm::tadl};
/// Report order.
inline constexpr Arm kAllArms[] = {Arm::full, Arm::task, Arm::tadl, Arm::sparse};

struct Layout {
  std::filesystem::path root;

  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path sample(int id) const;
  std::filesystem::path models(Arm arm) const { return root / "models" / to_string(arm); }
  std::filesystem::path fold(Arm arm, int k) const { return models(arm) / ("fold" + std::to_string(k)); }
  std::filesystem::path results() const { return root / "results"; }
  std::filesystem::path manifest(const std::string& stage) const;
};

/// Record of one completed (or started) stage: the hash of the settings it
/// depends on and a SHA-256 of every file it wrote.
struct Manifest {
  std::string stage;
  std::string config_hash;
  bool complete = false;
  std::map<std::string, std::string> files;  // path relative to root -> sha256

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

struct RunOptions {
  /// Discard existing output and redo the stage.
  bool force = false;
  /// Reuse a complete stage with matching settings and continue a partial
  /// one (training restarts from its last checkpoint).
  bool resume = false;
  std::function<void(const std::string&)> log;
};

/// k folds of a seeded permutation of 0..n-1; sizes differ by at most one,
/// larger folds first.
std::vector<std::vector<int>> kfold_split(int n, int k, std::uint64_t seed);

/// Sample ids: training set first, then the evaluation set.
std::vector<int> train_ids(const ExperimentConfig& cfg);
std::vector<int> eval_ids(const ExperimentConfig& cfg);

SampleMeta read_meta(const std::filesystem::path& path);
void write_meta(const SampleMeta& meta, const std::filesystem::path& path);

void run_simulate(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt);
void run_reconstruct(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt);
/// fold < 0 trains every fold and then selects one.
void run_train(const ExperimentConfig& cfg, const Layout& out, Arm arm, int fold, const RunOptions& opt);

struct ArmResult {
  Arm arm = Arm::full;
  double auc = 0.0;
  double variance = 0.0;
  std::filesystem::path scores_csv;
};

struct Comparison {
  Arm a = Arm::task;
  Arm b = Arm::sparse;
  DeLongResult delong;
};

struct StudyReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  int n_observer_train = 0;
  int n_test_present = 0;
  int n_test_absent = 0;
  std::map<std::string, int> selected_fold;   // trained arm -> fold
  std::map<std::string, double> lambda_used;  // trained arm -> effective lambda
  std::vector<ArmResult> arms;
  std::vector<Comparison> comparisons;

  const ArmResult& arm(Arm a) const;
  const Comparison& comparison(Arm a, Arm b) const;
};

StudyReport run_evaluate(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt);

/// Structured text of the report (deterministic: no timestamps).
std::string render_report(const StudyReport& r);

/// Reads results/report.txt back, then recomputes every AUC from the score
/// CSVs and throws if any differs.
StudyReport load_report(const Layout& out);

/// simulate, reconstruct, train both arms, evaluate.
StudyReport run_study(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt);

}  // namespace sparsespect::harness
