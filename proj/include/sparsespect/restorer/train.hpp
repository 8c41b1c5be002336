#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <vector>

#include "sparsespect/restorer/loss.hpp"
#include "sparsespect/restorer/network.hpp"

namespace sparsespect::nn {

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Normalization { none, train_mean };

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 4;
  int n_epochs = 10;
  std::uint64_t seed = 1;
  Normalization normalization = Normalization::train_mean;
  int n_threads = 1;

  void validate() const;
};

struct TrainingSample {
  Volume3D input;   // sparse-view crop (normalized)
  Volume3D target;  // full-view crop (normalized)
  SampleMeta meta;  // in crop coordinates
};

struct EpochRecord {
  int epoch = 0;
  double total = 0.0;
  double fidelity = 0.0;
  double channel = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// Everything needed to continue training bit-identically.
struct TrainState {
  NetParams params;
  AdamState adam;
  int epochs_done = 0;
  std::vector<EpochRecord> history;
};

struct BackwardResult {
  LossTerms loss;
  NetParams grads;
};

/// Loss and dLoss/dParams for one sample.
BackwardResult net_backward(const NetParams& params, const Volume3D& input, const Volume3D& truth,
                            const SampleMeta& meta, const LossConfig& cfg);

/// Mean loss terms of `params` over `data` (no parameter update).
LossTerms evaluate_loss(const NetParams& params, const std::vector<TrainingSample>& data, const LossConfig& cfg,
                        int n_threads = 1);

using EpochCallback = std::function<void(const TrainState&)>;

/// Adam over seeded shuffled minibatches until state.epochs_done reaches
/// cfg.n_epochs. Epoch e shuffles with derive_seed(cfg.seed, {e}), so a run
/// resumed from a saved state matches an uninterrupted one.
TrainState train(const std::vector<TrainingSample>& data, TrainState state, const LossConfig& loss_cfg,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean intensity over all voxels of the given volumes.
double mean_intensity(const std::vector<const Volume3D*>& volumes);

/// Parallel loop over [0, n) with `n_threads` workers; each index runs once.
void parallel_for(int n, int n_threads, const std::function<void(int)>& body);

// Versioned binary checkpoint: magic "SPCK", u32 version, architecture
// descriptor, normalization scale, training progress, then the flat
// parameter payload and Adam moments, all little-endian.
struct Checkpoint {
  TrainState state;
  double normalization_scale = 1.0;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// CSV with header "epoch,total,fidelity,channel".
void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace sparsespect::nn
