#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sparsespect/channels.hpp"
#include "sparsespect/osem.hpp"
#include "sparsespect/phantom.hpp"
#include "sparsespect/restorer/loss.hpp"
#include "sparsespect/restorer/train.hpp"

namespace sparsespect::harness {

struct DatasetSizes {
  int n_train = 184;
  int n_train_present = 92;
  int n_eval = 265;
  int n_eval_present = 131;

  int n_total() const { return n_train + n_eval; }
};

struct ProtocolConfig {
  int n_full_angles = 30;
  int n_sparse_angles = 5;
  double span_deg = 180.0;
  double start_deg = 0.0;
  /// Mean counts per full-view projection of the healthy phantom.
  double counts_per_view = 120000.0;
};

struct ReconConfig {
  OsemConfig full{8, 6, 1.0, 1e-12};
  OsemConfig sparse{8, 5, 1.0, 1e-12};
  int crop_size = 48;
};

struct NetworkConfig {
  int width1 = 8;
  int width2 = 16;
  int width3 = 32;
  /// Small last-layer weights start the residual net near the identity.
  double final_gain = 0.1;
};

struct LossSettings {
  double lambda = 0.1;
  bool normalize_channel_term = true;
  /// Multiply lambda by fidelity/channel of the untrained net on the
  /// training fold, so lambda = 1 weights both terms equally at the start.
  bool calibrate_lambda = true;
  nn::SliceRangeMode slice_range_mode = nn::SliceRangeMode::per_sample_meta;
  int fixed_slice_lo = 0;
  int fixed_slice_hi = 0;
  nn::AbsentShift absent_shift = nn::AbsentShift::signal_location;
};

enum class FeatureLocation { signal_location, lv_center };

struct ObserverConfig {
  double ridge_fraction = 1e-6;
  double train_fraction = 0.5;
  /// Where features of defect-absent cases are taken.
  FeatureLocation absent_location = FeatureLocation::signal_location;
};

struct ExperimentConfig {
  std::uint64_t seed = 20240501;
  int n_threads = 1;
  DatasetSizes dataset;
  PopulationConfig population;
  ProtocolConfig protocol;
  ReconConfig recon;
  std::vector<Passband> passbands = default_passbands();
  NetworkConfig network;
  LossSettings loss;
  nn::TrainConfig train{.n_epochs = 4};
  int n_folds = 5;
  ObserverConfig observer;

  void validate() const;
};

/// Parses an INI file; unknown sections or keys are errors. Missing keys
/// keep their defaults.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);

/// Canonical INI text of every setting. parse_config(to_ini(c)) == c.
std::string to_ini(const ExperimentConfig& cfg);

enum class Stage { simulate, reconstruct, train, evaluate };
std::string to_string(Stage s);

/// SHA-256 over the canonical settings a stage (and everything upstream of
/// it) depends on. Changing training settings leaves the simulate hash
/// untouched, so earlier stages can be reused.
std::string stage_hash(const ExperimentConfig& cfg, Stage s);
std::string config_hash(const ExperimentConfig& cfg);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace sparsespect::harness
