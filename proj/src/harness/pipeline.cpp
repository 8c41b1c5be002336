#include "sparsespect/harness/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>

#include "sparsespect/osem.hpp"
#include "sparsespect/projector.hpp"
#include "sparsespect/restorer/network.hpp"
#include "sparsespect/restorer/train.hpp"
#include "sparsespect/rng.hpp"
#include "sparsespect/text.hpp"

namespace fs = std::filesystem;

namespace sparsespect::harness {

namespace {

// Stream tags under the master seed.
enum : std::uint64_t {
  kTagPhantom = 1,
  kTagPresence = 2,
  kTagNoise = 3,
  kTagFolds = 4,
  kTagInit = 5,
  kTagShuffle = 6,
  kTagObserver = 7,
};

void say(const RunOptions& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

std::string rel(const Layout& out, const fs::path& p) { return fs::relative(p, out.root).generic_string(); }

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(l);
  }
  return lines;
}

std::pair<std::string, std::string> key_value(const std::string& line) {
  const auto eq = line.find(" = ");
  if (eq == std::string::npos) throw FormatError("expected 'key = value', got '" + line + "'");
  return {line.substr(0, eq), line.substr(eq + 3)};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed for " + path.string());
}

// --- stage bookkeeping -------------------------------------------------------

// Returns false when a complete stage with the same hash may be reused.
bool begin_stage(const Layout& out, const std::string& stage, const std::string& hash, const RunOptions& opt,
                 bool& partial_resume) {
  partial_resume = false;
  const fs::path mpath = out.manifest(stage);
  if (fs::exists(mpath) && !opt.force) {
    const Manifest m = Manifest::read(mpath);
    if (m.config_hash != hash) {
      throw StageError(kExitRefused, stage + ": existing output was produced by different settings (" + mpath.string() +
                                         "); pass --force to overwrite");
    }
    if (!opt.resume) {
      throw StageError(kExitRefused, stage + (m.complete ? ": output already complete" : ": partial run detected") +
                                         " at " + mpath.string() + "; pass --resume to reuse it or --force to redo it");
    }
    if (m.complete) {
      say(opt, stage + ": complete, reusing");
      return false;
    }
    partial_resume = true;
    say(opt, stage + ": resuming partial run");
  }
  fs::create_directories(mpath.parent_path());
  Manifest{stage, hash, false, {}}.write(mpath);
  return true;
}

void finish_stage(const Layout& out, const std::string& stage, const std::string& hash,
                  const std::vector<fs::path>& files) {
  Manifest m{stage, hash, true, {}};
  for (const auto& f : files) m.files[rel(out, f)] = sha256_file(f);
  m.write(out.manifest(stage));
}

void require_stage(const Layout& out, const std::string& stage, const std::string& hash, int code) {
  const fs::path mpath = out.manifest(stage);
  if (!fs::exists(mpath)) throw StageError(code, "missing input: stage '" + stage + "' has not been run");
  const Manifest m = Manifest::read(mpath);
  if (!m.complete) throw StageError(code, "stage '" + stage + "' is incomplete (" + mpath.string() + ")");
  if (m.config_hash != hash) {
    throw StageError(code, "stage '" + stage + "' was run with different settings; rerun it with --force");
  }
  for (const auto& [f, sha] : m.files) {
    if (!fs::exists(out.root / f)) throw StageError(code, "stage '" + stage + "' output missing: " + f);
  }
}

// --- shared loading ----------------------------------------------------------

Dims3 crop_dims(const ExperimentConfig& cfg) {
  return {cfg.recon.crop_size, cfg.recon.crop_size, cfg.recon.crop_size};
}

Index3 crop_center(const SampleMeta& meta) { return round_index(meta.lv_center_vox); }

SampleMeta crop_meta(const ExperimentConfig& cfg, const SampleMeta& meta) {
  return meta.in_window(crop_origin(crop_center(meta), crop_dims(cfg)), crop_dims(cfg));
}

nn::Architecture architecture(const ExperimentConfig& cfg) {
  return nn::Architecture::encoder_decoder(cfg.network.width1, cfg.network.width2, cfg.network.width3);
}

Volume3D scaled(const Volume3D& v, double s) {
  Volume3D out = v;
  for (double& x : out.storage()) x *= s;
  return out;
}

struct Case {
  int id = 0;
  SampleMeta meta;  // crop coordinates
  Volume3D full;
  Volume3D sparse;
};

std::vector<Case> load_cases(const ExperimentConfig& cfg, const Layout& out, const std::vector<int>& ids) {
  std::vector<Case> cases(ids.size());
  nn::parallel_for(static_cast<int>(ids.size()), cfg.n_threads, [&](int i) {
    const auto dir = out.sample(ids[static_cast<std::size_t>(i)]);
    Case& c = cases[static_cast<std::size_t>(i)];
    c.id = ids[static_cast<std::size_t>(i)];
    c.meta = crop_meta(cfg, read_meta(dir / "meta.txt"));
    c.full = read_volume(dir / "recon_full.spv");
    c.sparse = read_volume(dir / "recon_sparse.spv");
  });
  return cases;
}

std::string fmt_point(const Point3& p) {
  return format_double(p[0]) + " " + format_double(p[1]) + " " + format_double(p[2]);
}

Point3 parse_point(const std::string& s) {
  std::istringstream in(s);
  std::string a, b, c, extra;
  if (!(in >> a >> b >> c) || (in >> extra)) throw FormatError("expected three coordinates, got '" + s + "'");
  return {parse_double(a), parse_double(b), parse_double(c)};
}

}  // namespace

// --- small public pieces -----------------------------------------------------

std::string to_string(Arm a) {
  switch (a) {
    case Arm::full: return "full";
    case Arm::sparse: return "sparse";
    case Arm::tadl: return "tadl";
    case Arm::task: return "task";
  }
  return "?";
}

Arm parse_arm(const std::string& s) {
  for (Arm a : kAllArms)
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown arm '" + s + "' (expected full, sparse, tadl or task)");
}

fs::path Layout::sample(int id) const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04d", id);
  return dataset() / buf;
}

fs::path Layout::manifest(const std::string& stage) const {
  if (stage == "simulate") return dataset() / "manifest.txt";
  return root / "manifests" / (stage + ".txt");
}

void Manifest::write(const fs::path& path) const {
  std::string text = "stage = " + stage + "\nconfig_hash = " + config_hash +
                     "\nstatus = " + (complete ? "complete" : "started") + "\n";
  for (const auto& [f, sha] : files) text += "file = " + sha + " " + f + "\n";
  write_text(path, text);
}

Manifest Manifest::read(const fs::path& path) {
  Manifest m;
  bool have_status = false;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const auto [k, v] = key_value(line);
    if (k == "stage") {
      m.stage = v;
    } else if (k == "config_hash") {
      m.config_hash = v;
    } else if (k == "status") {
      if (v != "complete" && v != "started") throw FormatError("manifest: bad status '" + v + "'");
      m.complete = v == "complete";
      have_status = true;
    } else if (k == "file") {
      const auto sp = v.find(' ');
      if (sp == std::string::npos) throw FormatError("manifest: bad file line '" + line + "'");
      m.files[v.substr(sp + 1)] = v.substr(0, sp);
    } else {
      throw FormatError("manifest: unknown key '" + k + "' in " + path.string());
    }
  }
  if (m.stage.empty() || m.config_hash.empty() || !have_status) {
    throw FormatError("manifest: incomplete header in " + path.string());
  }
  return m;
}

std::vector<std::vector<int>> kfold_split(int n, int k, std::uint64_t seed) {
  if (k < 2 || k > n) throw std::invalid_argument("kfold_split: need 2 <= k <= n");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const int size = n / k + (f < n % k ? 1 : 0);
    folds[static_cast<std::size_t>(f)].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                                              perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += static_cast<std::size_t>(size);
  }
  return folds;
}

std::vector<int> train_ids(const ExperimentConfig& cfg) {
  std::vector<int> ids(static_cast<std::size_t>(cfg.dataset.n_train));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

std::vector<int> eval_ids(const ExperimentConfig& cfg) {
  std::vector<int> ids(static_cast<std::size_t>(cfg.dataset.n_eval));
  std::iota(ids.begin(), ids.end(), cfg.dataset.n_train);
  return ids;
}

void write_meta(const SampleMeta& m, const fs::path& path) {
  std::string t;
  t += "sample_id = " + std::to_string(m.sample_id) + "\n";
  t += "cluster_id = " + std::to_string(m.cluster_id) + "\n";
  t += std::string("defect_present = ") + (m.defect_present ? "1" : "0") + "\n";
  t += "defect_centroid_vox = " + fmt_point(m.defect_centroid_vox) + "\n";
  t += "lv_center_vox = " + fmt_point(m.lv_center_vox) + "\n";
  t += "signal_location_vox = " + fmt_point(m.signal_location_vox) + "\n";
  t += "slice_lo = " + std::to_string(m.slice_lo) + "\n";
  t += "slice_hi = " + std::to_string(m.slice_hi) + "\n";
  if (m.defect) {
    t += "defect_location = " + to_string(m.defect->location) + "\n";
    t += "defect_center_angle_deg = " + format_double(m.defect->center_angle_deg) + "\n";
    t += "defect_extent_deg = " + format_double(m.defect->extent_deg) + "\n";
    t += "defect_severity = " + format_double(m.defect->severity_frac) + "\n";
    t += "defect_axial_slices = " + std::to_string(m.defect->axial_extent_slices) + "\n";
  }
  write_text(path, t);
}

SampleMeta read_meta(const fs::path& path) {
  SampleMeta m;
  std::map<std::string, std::string> kv;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const auto [k, v] = key_value(line);
    kv[k] = v;
  }
  auto take = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("meta: missing '") + key + "' in " + path.string());
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  m.sample_id = static_cast<int>(parse_int(take("sample_id")));
  m.cluster_id = static_cast<int>(parse_int(take("cluster_id")));
  m.defect_present = parse_int(take("defect_present")) != 0;
  m.defect_centroid_vox = parse_point(take("defect_centroid_vox"));
  m.lv_center_vox = parse_point(take("lv_center_vox"));
  m.signal_location_vox = parse_point(take("signal_location_vox"));
  m.slice_lo = static_cast<int>(parse_int(take("slice_lo")));
  m.slice_hi = static_cast<int>(parse_int(take("slice_hi")));
  if (kv.count("defect_location")) {
    DefectSpec d;
    d.location = parse_wall_location(take("defect_location"));
    d.center_angle_deg = parse_double(take("defect_center_angle_deg"));
    d.extent_deg = parse_double(take("defect_extent_deg"));
    d.severity_frac = parse_double(take("defect_severity"));
    d.axial_extent_slices = static_cast<int>(parse_int(take("defect_axial_slices")));
    m.defect = d;
  }
  if (!kv.empty()) throw FormatError("meta: unknown key '" + kv.begin()->first + "' in " + path.string());
  return m;
}

// --- simulate ----------------------------------------------------------------

void run_simulate(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt) {
  cfg.validate();
  const std::string stage = "simulate";
  const std::string hash = stage_hash(cfg, Stage::simulate);
  bool partial = false;
  if (!begin_stage(out, stage, hash, opt, partial)) return;

  const auto& pop = cfg.population;
  const auto angles = uniform_angles(cfg.protocol.n_full_angles, cfg.protocol.span_deg, cfg.protocol.start_deg);
  const ParallelProjector projector(pop.dims, angles, pop.voxel_mm);
  const auto sparse_idx = select_angles(cfg.protocol.n_full_angles, cfg.protocol.n_sparse_angles);

  const auto present_train =
      assign_presence(cfg.dataset.n_train, cfg.dataset.n_train_present, derive_seed(cfg.seed, {kTagPresence, 0}));
  const auto present_eval =
      assign_presence(cfg.dataset.n_eval, cfg.dataset.n_eval_present, derive_seed(cfg.seed, {kTagPresence, 1}));

  const int n = cfg.dataset.n_total();
  std::vector<std::vector<fs::path>> written(static_cast<std::size_t>(n));
  std::mutex log_mu;
  nn::parallel_for(n, cfg.n_threads, [&](int id) {
    const bool present = id < cfg.dataset.n_train ? present_train[static_cast<std::size_t>(id)]
                                                  : present_eval[static_cast<std::size_t>(id - cfg.dataset.n_train)];
    const PhantomSample s = draw_sample(pop, id, present, derive_seed(cfg.seed, {kTagPhantom}));
    const ProjectionSet healthy = projector.forward(s.activity);
    ProjectionSet expected = healthy;
    if (s.defect_only) {
      // The defect is removed from the noiseless scan before noise is drawn.
      const ProjectionSet d = projector.forward(*s.defect_only);
      for (std::size_t i = 0; i < expected.bins.size(); ++i) {
        expected.bins[i] = std::max(0.0, expected.bins[i] - d.bins[i]);
      }
    }
    const ProjectionSet counts = simulate_counts(expected, cfg.protocol.counts_per_view, healthy,
                                                 derive_seed(cfg.seed, {kTagNoise, static_cast<std::uint64_t>(id)}));
    const ProjectionSet sparse = counts.subset(sparse_idx);

    const fs::path dir = out.sample(id);
    fs::create_directories(dir);
    auto& files = written[static_cast<std::size_t>(id)];
    auto put_volume = [&](const Volume3D& v, const char* name) {
      write_volume(v, dir / name);
      files.push_back(dir / name);
    };
    put_volume(s.activity, "phantom.spv");
    put_volume(s.wall_mask, "mask.spv");
    if (s.defect_only) put_volume(*s.defect_only, "defect.spv");
    else fs::remove(dir / "defect.spv");
    write_projections(counts, dir / "proj_full.spv");
    write_projections(sparse, dir / "proj_sparse.spv");
    for (const char* p : {"proj_full.spv", "proj_sparse.spv"}) {
      files.push_back(dir / p);
      files.push_back(angles_sidecar(dir / p));
    }
    write_meta(s.meta, dir / "meta.txt");
    files.push_back(dir / "meta.txt");
    if ((id + 1) % 50 == 0 || id + 1 == n) {
      std::lock_guard lock(log_mu);
      say(opt, "simulate: " + std::to_string(id + 1) + "/" + std::to_string(n));
    }
  });
  std::vector<fs::path> all;
  for (auto& w : written) all.insert(all.end(), w.begin(), w.end());
  finish_stage(out, stage, hash, all);
}

// --- reconstruct -------------------------------------------------------------

void run_reconstruct(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt) {
  cfg.validate();
  require_stage(out, "simulate", stage_hash(cfg, Stage::simulate), kExitReconstruct);
  const std::string stage = "reconstruct";
  const std::string hash = stage_hash(cfg, Stage::reconstruct);
  bool partial = false;
  if (!begin_stage(out, stage, hash, opt, partial)) return;

  const auto& pop = cfg.population;
  const auto angles = uniform_angles(cfg.protocol.n_full_angles, cfg.protocol.span_deg, cfg.protocol.start_deg);
  const auto sparse_idx = select_angles(cfg.protocol.n_full_angles, cfg.protocol.n_sparse_angles);
  std::vector<double> sparse_angles;
  for (int i : sparse_idx) sparse_angles.push_back(angles[static_cast<std::size_t>(i)]);
  const ParallelProjector full_proj(pop.dims, angles, pop.voxel_mm);
  const ParallelProjector sparse_proj(pop.dims, sparse_angles, pop.voxel_mm);

  const int n = cfg.dataset.n_total();
  std::vector<std::vector<fs::path>> written(static_cast<std::size_t>(n));
  std::mutex log_mu;
  nn::parallel_for(n, cfg.n_threads, [&](int id) {
    const fs::path dir = out.sample(id);
    const SampleMeta meta = read_meta(dir / "meta.txt");
    const auto full = read_projections(dir / "proj_full.spv", ProjectionKind::counts);
    const auto sparse = read_projections(dir / "proj_sparse.spv", ProjectionKind::counts);
    const Volume3D rf = osem(full, full_proj, cfg.recon.full);
    const Volume3D rs = osem(sparse, sparse_proj, cfg.recon.sparse);
    write_volume(crop_centered(rf, crop_center(meta), crop_dims(cfg)), dir / "recon_full.spv");
    write_volume(crop_centered(rs, crop_center(meta), crop_dims(cfg)), dir / "recon_sparse.spv");
    written[static_cast<std::size_t>(id)] = {dir / "recon_full.spv", dir / "recon_sparse.spv"};
    if ((id + 1) % 50 == 0 || id + 1 == n) {
      std::lock_guard lock(log_mu);
      say(opt, "reconstruct: " + std::to_string(id + 1) + "/" + std::to_string(n));
    }
  });
  std::vector<fs::path> all;
  for (auto& w : written) all.insert(all.end(), w.begin(), w.end());
  finish_stage(out, stage, hash, all);
}

// --- train -------------------------------------------------------------------

namespace {

struct FoldOutcome {
  double validation_total = 0.0;
  double lambda_effective = 0.0;
};

std::vector<nn::EpochRecord> read_history_csv(const fs::path& path) {
  std::vector<nn::EpochRecord> out;
  const auto lines = read_lines(path);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    std::istringstream in(lines[i]);
    for (std::string s; std::getline(in, s, ',');) f.push_back(s);
    if (f.size() != 4) throw FormatError("history: bad row in " + path.string());
    out.push_back({static_cast<int>(parse_int(f[0])), parse_double(f[1]), parse_double(f[2]), parse_double(f[3])});
  }
  return out;
}

FoldOutcome read_fold_outcome(const fs::path& dir) {
  FoldOutcome o;
  for (const auto& line : read_lines(dir / "outcome.txt")) {
    if (line.empty()) continue;
    const auto [k, v] = key_value(line);
    if (k == "validation_total") o.validation_total = parse_double(v);
    else if (k == "lambda_effective") o.lambda_effective = parse_double(v);
  }
  return o;
}

FoldOutcome train_fold(const ExperimentConfig& cfg, const Layout& out, Arm arm, int k, const std::vector<Case>& cases,
                       const std::vector<std::vector<int>>& folds, bool resume, const RunOptions& opt) {
  const fs::path dir = out.fold(arm, k);
  fs::create_directories(dir);
  std::vector<const Case*> tr, va;
  for (int f = 0; f < static_cast<int>(folds.size()); ++f) {
    for (int i : folds[static_cast<std::size_t>(f)]) (f == k ? va : tr).push_back(&cases[static_cast<std::size_t>(i)]);
  }
  // Keep the in-fold order independent of the permutation.
  auto by_id = [](const Case* a, const Case* b) { return a->id < b->id; };
  std::sort(tr.begin(), tr.end(), by_id);
  std::sort(va.begin(), va.end(), by_id);

  double scale = 1.0;
  if (cfg.train.normalization == nn::Normalization::train_mean) {
    std::vector<const Volume3D*> targets;
    for (const Case* c : tr) targets.push_back(&c->full);
    scale = nn::mean_intensity(targets);
    if (!(scale > 0.0)) throw StageError(kExitTrain, "train: training targets have zero mean intensity");
  }
  auto to_samples = [&](const std::vector<const Case*>& src) {
    std::vector<nn::TrainingSample> s;
    for (const Case* c : src) s.push_back({scaled(c->sparse, 1.0 / scale), scaled(c->full, 1.0 / scale), c->meta});
    return s;
  };
  const auto train_set = to_samples(tr);
  const auto val_set = to_samples(va);

  const ChannelBank bank(cfg.recon.crop_size, cfg.recon.crop_size, cfg.passbands);
  nn::LossConfig lc;
  lc.bank = &bank;
  lc.lambda = arm == Arm::tadl ? 0.0 : cfg.loss.lambda;
  lc.normalize_channel_term = cfg.loss.normalize_channel_term;
  lc.slice_range_mode = cfg.loss.slice_range_mode;
  lc.fixed_slice_lo = cfg.loss.fixed_slice_lo;
  lc.fixed_slice_hi = cfg.loss.fixed_slice_hi;
  lc.absent_shift = cfg.loss.absent_shift;

  nn::TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.train.seed, {kTagShuffle, static_cast<std::uint64_t>(k)});
  tc.n_threads = cfg.n_threads;

  nn::TrainState state;
  std::vector<nn::EpochRecord> val_history;
  const fs::path ckpt_path = dir / "checkpoint.bin";
  if (resume && fs::exists(ckpt_path) && fs::exists(dir / "lambda.txt")) {
    const auto ck = nn::read_checkpoint(ckpt_path);
    state = ck.state;
    lc.lambda = parse_double(read_lines(dir / "lambda.txt").at(0));
    val_history = read_history_csv(dir / "validation.csv");
    val_history.resize(std::min(val_history.size(), static_cast<std::size_t>(state.epochs_done)));
    say(opt, "train " + to_string(arm) + " fold " + std::to_string(k) + ": resuming at epoch " +
                 std::to_string(state.epochs_done));
  } else {
    // Both arms start from the same weights in a given fold.
    state.params = nn::init_params(architecture(cfg), derive_seed(cfg.train.seed, {kTagInit, static_cast<std::uint64_t>(k)}),
                                   cfg.network.final_gain);
    if (lc.lambda > 0.0 && cfg.loss.calibrate_lambda) {
      nn::LossConfig probe = lc;
      probe.lambda = 1.0;
      const auto t0 = nn::evaluate_loss(state.params, train_set, probe, cfg.n_threads);
      if (!(t0.channel > 0.0)) throw StageError(kExitTrain, "train: channel term is zero at initialization");
      lc.lambda *= t0.fidelity / t0.channel;
      say(opt, "train " + to_string(arm) + " fold " + std::to_string(k) + ": lambda calibrated to " +
                   format_double(lc.lambda));
    }
    write_text(dir / "lambda.txt", format_double(lc.lambda) + "\n");
  }

  auto on_epoch = [&](const nn::TrainState& st) {
    const auto v = nn::evaluate_loss(st.params, val_set, lc, cfg.n_threads);
    val_history.push_back({st.epochs_done - 1, v.total, v.fidelity, v.channel});
    nn::write_checkpoint({st, scale}, ckpt_path);
    nn::write_history_csv(st.history, dir / "history.csv");
    nn::write_history_csv(val_history, dir / "validation.csv");
    const auto& h = st.history.back();
    say(opt, "train " + to_string(arm) + " fold " + std::to_string(k) + " epoch " + std::to_string(h.epoch) +
                 ": train " + format_double(h.total) + " val " + format_double(v.total));
  };
  try {
    state = nn::train(train_set, std::move(state), lc, tc, on_epoch);
  } catch (const nn::TrainingDivergedError& e) {
    throw StageError(kExitTrain, std::string("train ") + to_string(arm) + " fold " + std::to_string(k) + ": " + e.what());
  }
  if (val_history.empty()) {
    // Zero epochs: still record the untrained net.
    const auto v = nn::evaluate_loss(state.params, val_set, lc, cfg.n_threads);
    val_history.push_back({-1, v.total, v.fidelity, v.channel});
    nn::write_checkpoint({state, scale}, ckpt_path);
    nn::write_history_csv(state.history, dir / "history.csv");
    nn::write_history_csv(val_history, dir / "validation.csv");
  }
  FoldOutcome o{val_history.back().total, lc.lambda};
  write_text(dir / "outcome.txt", "validation_total = " + format_double(o.validation_total) +
                                      "\nlambda_effective = " + format_double(o.lambda_effective) + "\n");
  return o;
}

std::string fold_stage(Arm arm, int k) { return "train_" + to_string(arm) + "_fold" + std::to_string(k); }
std::string arm_stage(Arm arm) { return "train_" + to_string(arm); }

}  // namespace

void run_train(const ExperimentConfig& cfg, const Layout& out, Arm arm, int fold, const RunOptions& opt) {
  cfg.validate();
  if (arm != Arm::task && arm != Arm::tadl) throw StageError(kExitUsage, "train: arm must be task or tadl");
  if (fold >= cfg.n_folds) throw StageError(kExitUsage, "train: fold out of range");
  require_stage(out, "reconstruct", stage_hash(cfg, Stage::reconstruct), kExitTrain);
  const std::string hash = stage_hash(cfg, Stage::train);

  std::optional<std::vector<Case>> cases;
  const auto folds = kfold_split(cfg.dataset.n_train, cfg.n_folds, derive_seed(cfg.seed, {kTagFolds}));
  auto run_fold = [&](int k, const RunOptions& fopt) {
    bool partial = false;
    const std::string stage = fold_stage(arm, k);
    if (!begin_stage(out, stage, hash, fopt, partial)) return;
    if (!cases) cases = load_cases(cfg, out, train_ids(cfg));
    train_fold(cfg, out, arm, k, *cases, folds, partial, fopt);
    const fs::path dir = out.fold(arm, k);
    finish_stage(out, stage, hash,
                 {dir / "checkpoint.bin", dir / "history.csv", dir / "validation.csv", dir / "lambda.txt",
                  dir / "outcome.txt"});
  };

  if (fold >= 0) {
    run_fold(fold, opt);
    return;
  }
  bool partial = false;
  if (!begin_stage(out, arm_stage(arm), hash, opt, partial)) return;
  // Folds trained individually beforehand are picked up, not redone.
  RunOptions fopt = opt;
  fopt.resume = !opt.force;
  for (int k = 0; k < cfg.n_folds; ++k) run_fold(k, fopt);

  int best = 0;
  std::vector<FoldOutcome> outcomes;
  for (int k = 0; k < cfg.n_folds; ++k) {
    outcomes.push_back(read_fold_outcome(out.fold(arm, k)));
    if (outcomes.back().validation_total < outcomes[static_cast<std::size_t>(best)].validation_total) best = k;
  }
  const fs::path sel = out.models(arm) / "selected.txt";
  write_text(sel, "fold = " + std::to_string(best) + "\nvalidation_total = " +
                      format_double(outcomes[static_cast<std::size_t>(best)].validation_total) +
                      "\nlambda_effective = " + format_double(outcomes[static_cast<std::size_t>(best)].lambda_effective) +
                      "\n");
  say(opt, "train " + to_string(arm) + ": selected fold " + std::to_string(best));
  std::vector<fs::path> files{sel};
  for (int k = 0; k < cfg.n_folds; ++k) files.push_back(out.fold(arm, k) / "checkpoint.bin");
  finish_stage(out, arm_stage(arm), hash, files);
}

// --- evaluate ----------------------------------------------------------------

const ArmResult& StudyReport::arm(Arm a) const {
  for (const auto& r : arms)
    if (r.arm == a) return r;
  throw std::out_of_range("report has no arm " + to_string(a));
}

const Comparison& StudyReport::comparison(Arm a, Arm b) const {
  for (const auto& c : comparisons)
    if (c.a == a && c.b == b) return c;
  throw std::out_of_range("report has no comparison " + to_string(a) + " vs " + to_string(b));
}

namespace {

struct Selected {
  int fold = 0;
  double lambda = 0.0;
};

Selected read_selected(const Layout& out, Arm arm) {
  Selected s;
  for (const auto& line : read_lines(out.models(arm) / "selected.txt")) {
    if (line.empty()) continue;
    const auto [k, v] = key_value(line);
    if (k == "fold") s.fold = static_cast<int>(parse_int(v));
    else if (k == "lambda_effective") s.lambda = parse_double(v);
  }
  return s;
}

constexpr std::pair<Arm, Arm> kComparisons[] = {
    {Arm::task, Arm::sparse}, {Arm::task, Arm::tadl}, {Arm::full, Arm::sparse}, {Arm::full, Arm::task}};

std::string comparison_key(Arm a, Arm b) { return to_string(a) + "_vs_" + to_string(b); }

struct ScoreRow {
  int sample_id = 0;
  int cluster_id = 0;
  bool present = false;
  double score = 0.0;
};

std::vector<ScoreRow> read_scores(const fs::path& path) {
  std::vector<ScoreRow> rows;
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "sample_id,cluster_id,class,score") {
    throw FormatError("scores: bad header in " + path.string());
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    std::istringstream in(lines[i]);
    for (std::string s; std::getline(in, s, ',');) f.push_back(s);
    if (f.size() != 4) throw FormatError("scores: bad row in " + path.string());
    rows.push_back({static_cast<int>(parse_int(f[0])), static_cast<int>(parse_int(f[1])), parse_int(f[2]) != 0,
                    parse_double(f[3])});
  }
  return rows;
}

ObserverStudy study_from(const std::vector<ScoreRow>& rows) {
  ObserverStudy s;
  for (const auto& r : rows) {
    (r.present ? s.scores_present : s.scores_absent).push_back(r.score);
    (r.present ? s.cluster_ids_present : s.cluster_ids_absent).push_back(r.cluster_id);
  }
  return s;
}

void fill_statistics(StudyReport& r, const std::map<Arm, ObserverStudy>& studies) {
  for (auto& a : r.arms) {
    const auto& s = studies.at(a.arm);
    a.auc = auc(s.scores_present, s.scores_absent);
    a.variance = auc_variance(s);
  }
  r.comparisons.clear();
  for (auto [a, b] : kComparisons) r.comparisons.push_back({a, b, delong_paired(studies.at(a), studies.at(b))});
}

const char* kSchema =
    "scores_<arm>.csv\n"
    "  sample_id   integer  case id in the dataset directory (sNNNN)\n"
    "  cluster_id  integer  patient cluster used by the clustered DeLong estimator\n"
    "  class       0|1      1 = defect present\n"
    "  score       real     CHO test statistic on the observer-test half\n"
    "\n"
    "features_<arm>.csv\n"
    "  sample_id, cluster_id, class as above\n"
    "  split       train|test  observer half the case belongs to\n"
    "  c0..cN      real        channel outputs at the signal location\n"
    "\n"
    "auc_plot.csv\n"
    "  arm         full|task|tadl|sparse\n"
    "  auc         real  Mann-Whitney AUC on the observer-test half\n"
    "  ci_lo       real  auc - 1.96 * sqrt(variance), clipped to [0, 1]\n"
    "  ci_hi       real  auc + 1.96 * sqrt(variance), clipped to [0, 1]\n"
    "\n"
    "report.txt\n"
    "  'key = value' lines; auc.<arm>, variance.<arm>, scores.<arm>, and\n"
    "  compare.<a>_vs_<b>.{auc_a, auc_b, var_a, var_b, cov, z, p} for the paired tests.\n"
    "\n"
    "timing.txt\n"
    "  wall-clock seconds per stage; kept apart so report.txt stays reproducible.\n";

}  // namespace

StudyReport run_evaluate(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt) {
  cfg.validate();
  require_stage(out, "reconstruct", stage_hash(cfg, Stage::reconstruct), kExitEvaluate);
  for (Arm a : kTrainedArms) require_stage(out, arm_stage(a), stage_hash(cfg, Stage::train), kExitEvaluate);
  const std::string stage = "evaluate";
  const std::string hash = stage_hash(cfg, Stage::evaluate);
  {
    // Evaluation is cheap relative to training and always recomputed.
    RunOptions eopt = opt;
    eopt.resume = false;
    eopt.force = true;
    bool partial = false;
    begin_stage(out, stage, hash, eopt, partial);
  }

  const auto ids = eval_ids(cfg);
  const auto cases = load_cases(cfg, out, ids);
  const int n = static_cast<int>(cases.size());
  std::vector<fs::path> written;

  std::map<Arm, std::vector<const Volume3D*>> images;
  for (const auto& c : cases) {
    images[Arm::full].push_back(&c.full);
    images[Arm::sparse].push_back(&c.sparse);
  }
  std::map<Arm, std::vector<Volume3D>> restored;
  StudyReport report;
  report.config_hash = config_hash(cfg);
  report.seed = cfg.seed;
  for (Arm a : kTrainedArms) {
    const Selected sel = read_selected(out, a);
    const auto ck = nn::read_checkpoint(out.fold(a, sel.fold) / "checkpoint.bin");
    report.selected_fold[to_string(a)] = sel.fold;
    report.lambda_used[to_string(a)] = sel.lambda;
    auto& vols = restored[a];
    vols.resize(cases.size());
    nn::parallel_for(n, cfg.n_threads, [&](int i) {
      const auto& c = cases[static_cast<std::size_t>(i)];
      Volume3D r = scaled(nn::net_forward(ck.state.params, scaled(c.sparse, 1.0 / ck.normalization_scale)),
                          ck.normalization_scale);
      const fs::path p = out.sample(c.id) / ("restored_" + to_string(a) + ".spv");
      write_volume(r, p);
      vols[static_cast<std::size_t>(i)] = std::move(r);
    });
    for (const auto& c : cases) written.push_back(out.sample(c.id) / ("restored_" + to_string(a) + ".spv"));
    for (const auto& v : vols) images[a].push_back(&v);
    say(opt, "evaluate: restored " + to_string(a) + " with fold " + std::to_string(sel.fold));
  }

  // Stratified seeded split into observer-training and observer-test halves.
  std::vector<bool> in_train(cases.size(), false);
  {
    Rng rng(derive_seed(cfg.seed, {kTagObserver}));
    for (bool cls : {false, true}) {
      std::vector<int> idx;
      for (int i = 0; i < n; ++i)
        if (cases[static_cast<std::size_t>(i)].meta.defect_present == cls) idx.push_back(i);
      rng.shuffle(idx);
      const auto n_tr = static_cast<std::size_t>(std::lround(cfg.observer.train_fraction * static_cast<double>(idx.size())));
      if (n_tr == 0 || n_tr >= idx.size()) {
        throw StageError(kExitEvaluate, "evaluate: observer split leaves a class empty");
      }
      for (std::size_t j = 0; j < n_tr; ++j) in_train[static_cast<std::size_t>(idx[j])] = true;
    }
  }

  const ChannelBank bank(cfg.recon.crop_size, cfg.recon.crop_size, cfg.passbands);
  std::vector<SampleMeta> feature_meta;
  for (const auto& c : cases) {
    SampleMeta m = c.meta;
    if (!m.defect_present && cfg.observer.absent_location == FeatureLocation::lv_center) {
      m.signal_location_vox = m.lv_center_vox;
    }
    feature_meta.push_back(m);
  }

  fs::create_directories(out.results());
  std::map<Arm, ObserverStudy> studies;
  for (Arm a : kAllArms) {
    std::vector<ChannelVector> feats(cases.size());
    for (int i = 0; i < n; ++i) {
      feats[static_cast<std::size_t>(i)] =
          extract_feature(*images[a][static_cast<std::size_t>(i)], feature_meta[static_cast<std::size_t>(i)], bank);
    }
    std::vector<ChannelVector> tp, ta, test;
    std::vector<int> test_idx;
    for (int i = 0; i < n; ++i) {
      const auto& f = feats[static_cast<std::size_t>(i)];
      if (in_train[static_cast<std::size_t>(i)]) {
        (cases[static_cast<std::size_t>(i)].meta.defect_present ? tp : ta).push_back(f);
      } else {
        test.push_back(f);
        test_idx.push_back(i);
      }
    }
    ChoTemplate tmpl;
    try {
      tmpl = cho_train(tp, ta, default_ridge(tp, ta, cfg.observer.ridge_fraction));
    } catch (const SingularCovarianceError& e) {
      throw StageError(kExitEvaluate, "evaluate " + to_string(a) + ": " + e.what());
    }
    const auto scores = cho_apply(tmpl, test);

    const fs::path scores_csv = out.results() / ("scores_" + to_string(a) + ".csv");
    std::string text = "sample_id,cluster_id,class,score\n";
    std::vector<ScoreRow> rows;
    for (std::size_t j = 0; j < test_idx.size(); ++j) {
      const auto& m = cases[static_cast<std::size_t>(test_idx[j])].meta;
      rows.push_back({m.sample_id, m.cluster_id, m.defect_present, scores[j]});
      text += std::to_string(m.sample_id) + "," + std::to_string(m.cluster_id) + "," + (m.defect_present ? "1" : "0") +
              "," + format_double(scores[j]) + "\n";
    }
    write_text(scores_csv, text);

    std::string ftext = "sample_id,cluster_id,class,split";
    for (int c = 0; c < bank.n_channels(); ++c) ftext += ",c" + std::to_string(c);
    ftext += "\n";
    for (int i = 0; i < n; ++i) {
      const auto& m = cases[static_cast<std::size_t>(i)].meta;
      ftext += std::to_string(m.sample_id) + "," + std::to_string(m.cluster_id) + "," +
               (m.defect_present ? "1" : "0") + "," + (in_train[static_cast<std::size_t>(i)] ? "train" : "test");
      for (double v : feats[static_cast<std::size_t>(i)]) ftext += "," + format_double(v);
      ftext += "\n";
    }
    const fs::path feats_csv = out.results() / ("features_" + to_string(a) + ".csv");
    write_text(feats_csv, ftext);
    written.push_back(scores_csv);
    written.push_back(feats_csv);

    studies[a] = study_from(rows);
    report.arms.push_back({a, 0.0, 0.0, scores_csv.filename()});
  }
  report.n_observer_train = static_cast<int>(std::count(in_train.begin(), in_train.end(), true));
  report.n_test_present = static_cast<int>(studies[Arm::full].scores_present.size());
  report.n_test_absent = static_cast<int>(studies[Arm::full].scores_absent.size());
  try {
    fill_statistics(report, studies);
  } catch (const DegenerateVarianceError& e) {
    throw StageError(kExitEvaluate, std::string("evaluate: ") + e.what());
  }

  std::string plot = "arm,auc,ci_lo,ci_hi\n";
  for (const auto& a : report.arms) {
    const double half = 1.96 * std::sqrt(std::max(0.0, a.variance));
    plot += to_string(a.arm) + "," + format_double(a.auc) + "," + format_double(std::max(0.0, a.auc - half)) + "," +
            format_double(std::min(1.0, a.auc + half)) + "\n";
  }
  write_text(out.results() / "auc_plot.csv", plot);
  write_text(out.results() / "report_schema.txt", kSchema);
  write_text(out.results() / "report.txt", render_report(report));
  for (const char* f : {"auc_plot.csv", "report_schema.txt", "report.txt"}) written.push_back(out.results() / f);
  finish_stage(out, stage, hash, written);
  return report;
}

std::string render_report(const StudyReport& r) {
  std::string t = "# four-arm defect-detection study (CHO, observer-test half)\n";
  t += "config_hash = " + r.config_hash + "\n";
  t += "seed = " + std::to_string(r.seed) + "\n";
  t += "observer_train_cases = " + std::to_string(r.n_observer_train) + "\n";
  t += "test_present = " + std::to_string(r.n_test_present) + "\n";
  t += "test_absent = " + std::to_string(r.n_test_absent) + "\n";
  for (const auto& [arm, fold] : r.selected_fold) t += "selected_fold." + arm + " = " + std::to_string(fold) + "\n";
  for (const auto& [arm, l] : r.lambda_used) t += "lambda." + arm + " = " + format_double(l) + "\n";
  for (const auto& a : r.arms) {
    const std::string n = to_string(a.arm);
    t += "auc." + n + " = " + format_double(a.auc) + "\n";
    t += "variance." + n + " = " + format_double(a.variance) + "\n";
    t += "scores." + n + " = " + a.scores_csv.generic_string() + "\n";
  }
  for (const auto& c : r.comparisons) {
    const std::string k = "compare." + comparison_key(c.a, c.b) + ".";
    t += k + "auc_a = " + format_double(c.delong.auc_a) + "\n";
    t += k + "auc_b = " + format_double(c.delong.auc_b) + "\n";
    t += k + "var_a = " + format_double(c.delong.var_a) + "\n";
    t += k + "var_b = " + format_double(c.delong.var_b) + "\n";
    t += k + "cov = " + format_double(c.delong.cov) + "\n";
    t += k + "z = " + format_double(c.delong.z) + "\n";
    t += k + "p = " + format_double(c.delong.p_two_sided) + "\n";
  }
  return t;
}

StudyReport load_report(const Layout& out) {
  const fs::path path = out.results() / "report.txt";
  std::map<std::string, std::string> kv;
  for (const auto& line : read_lines(path)) {
    if (line.empty() || line[0] == '#') continue;
    const auto [k, v] = key_value(line);
    kv[k] = v;
  }
  auto get = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("report: missing '" + k + "' in " + path.string());
    return it->second;
  };
  StudyReport r;
  r.config_hash = get("config_hash");
  r.seed = static_cast<std::uint64_t>(parse_int(get("seed")));
  r.n_observer_train = static_cast<int>(parse_int(get("observer_train_cases")));
  r.n_test_present = static_cast<int>(parse_int(get("test_present")));
  r.n_test_absent = static_cast<int>(parse_int(get("test_absent")));
  for (Arm a : kTrainedArms) {
    r.selected_fold[to_string(a)] = static_cast<int>(parse_int(get("selected_fold." + to_string(a))));
    r.lambda_used[to_string(a)] = parse_double(get("lambda." + to_string(a)));
  }
  std::map<Arm, ObserverStudy> studies;
  std::vector<int> reference_ids;
  for (Arm a : kAllArms) {
    ArmResult ar{a, 0.0, 0.0, get("scores." + to_string(a))};
    const auto rows = read_scores(out.results() / ar.scores_csv);
    std::vector<int> ids;
    for (const auto& row : rows) ids.push_back(row.sample_id);
    if (reference_ids.empty()) reference_ids = ids;
    else if (ids != reference_ids) throw FormatError("report: arms score different case lists");
    studies[a] = study_from(rows);
    r.arms.push_back(ar);
  }
  fill_statistics(r, studies);
  // The stored text must be exactly what the score files imply.
  std::ifstream in(path, std::ios::binary);
  std::ostringstream stored;
  stored << in.rdbuf();
  if (stored.str() != render_report(r)) {
    throw FormatError("report: " + path.string() + " does not match statistics recomputed from the score files");
  }
  return r;
}

StudyReport run_study(const ExperimentConfig& cfg, const Layout& out, const RunOptions& opt) {
  using clock = std::chrono::steady_clock;
  // A reused stage keeps the time recorded when it actually ran.
  std::map<std::string, std::string> previous;
  const fs::path timing_path = out.results() / "timing.txt";
  if (!opt.force && fs::exists(timing_path)) {
    for (const auto& line : read_lines(timing_path)) previous.insert(key_value(line));
  }
  std::string timing;
  auto timed = [&](const std::string& name, const std::function<void()>& f, bool reusable = true) {
    const fs::path mpath = out.manifest(name);
    const bool reused =
        reusable && !opt.force && fs::exists(mpath) && Manifest::read(mpath).complete && previous.count(name);
    const auto t0 = clock::now();
    f();
    const double dt = std::chrono::duration<double>(clock::now() - t0).count();
    timing += name + " = " + (reused ? previous.at(name) : format_double(dt)) + "\n";
  };
  StudyReport report;
  timed("simulate", [&] { run_simulate(cfg, out, opt); });
  timed("reconstruct", [&] { run_reconstruct(cfg, out, opt); });
  for (Arm a : kTrainedArms) timed("train_" + to_string(a), [&] { run_train(cfg, out, a, -1, opt); });
  timed("evaluate", [&] { report = run_evaluate(cfg, out, opt); }, false);
  write_text(out.results() / "timing.txt", timing);
  return report;
}

}  // namespace sparsespect::harness
