#include "sparsespect/harness/config.hpp"

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "sparsespect/text.hpp"

namespace sparsespect::harness {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

// A setting is a (section, key) pair with a formatter and a parser bound to
// one field of the config.
struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
  // Which stage first consumes it; used for per-stage hashing.
  Stage stage;
};

Field num(const char* sec, const char* key, Stage st, double& v) {
  return {sec, key, [&v] { return format_double(v); }, [&v](const std::string& s) { v = parse_double(s); }, st};
}

Field num(const char* sec, const char* key, Stage st, int& v) {
  return {sec, key, [&v] { return std::to_string(v); },
          [&v](const std::string& s) {
            const long long x = parse_int(s);
            if (x < INT32_MIN || x > INT32_MAX) throw std::invalid_argument("integer out of range: " + s);
            v = static_cast<int>(x);
          },
          st};
}

Field num(const char* sec, const char* key, Stage st, std::uint64_t& v) {
  return {sec, key, [&v] { return std::to_string(v); },
          [&v](const std::string& s) {
            const long long x = parse_int(s);
            if (x < 0) throw std::invalid_argument("seed must be nonnegative: " + s);
            v = static_cast<std::uint64_t>(x);
          },
          st};
}

Field flag(const char* sec, const char* key, Stage st, bool& v) {
  return {sec, key, [&v] { return std::string(v ? "true" : "false"); },
          [&v](const std::string& s) {
            if (s == "true" || s == "1") v = true;
            else if (s == "false" || s == "0") v = false;
            else throw std::invalid_argument("expected true/false, got '" + s + "'");
          },
          st};
}

Field range(const char* sec, const char* key, Stage st, Range& r) {
  return {sec, key, [&r] { return format_double(r.lo) + ", " + format_double(r.hi); },
          [&r](const std::string& s) {
            const auto p = split(s, ',');
            if (p.size() != 2) throw std::invalid_argument("expected 'lo, hi', got '" + s + "'");
            r = {parse_double(p[0]), parse_double(p[1])};
          },
          st};
}

template <class E>
Field choice(const char* sec, const char* key, Stage st, E& v, std::vector<std::pair<E, std::string>> names) {
  return {sec, key,
          [&v, names] {
            for (const auto& [e, n] : names)
              if (e == v) return n;
            throw std::logic_error("unnamed enum value");
          },
          [&v, names](const std::string& s) {
            for (const auto& [e, n] : names) {
              if (n == s) {
                v = e;
                return;
              }
            }
            std::vector<std::string> ok;
            for (const auto& p : names) ok.push_back(p.second);
            throw std::invalid_argument("expected one of {" + join(ok, ", ") + "}, got '" + s + "'");
          },
          st};
}

std::vector<Field> fields(ExperimentConfig& c) {
  using S = Stage;
  PopulationConfig& p = c.population;
  std::vector<Field> f{
      num("experiment", "seed", S::simulate, c.seed),
      num("dataset", "n_train", S::simulate, c.dataset.n_train),
      num("dataset", "n_train_present", S::simulate, c.dataset.n_train_present),
      num("dataset", "n_eval", S::simulate, c.dataset.n_eval),
      num("dataset", "n_eval_present", S::simulate, c.dataset.n_eval_present),
      num("population", "nx", S::simulate, p.dims.nx),
      num("population", "ny", S::simulate, p.dims.ny),
      num("population", "nz", S::simulate, p.dims.nz),
      num("population", "voxel_mm", S::simulate, p.voxel_mm),
      range("population", "center_offset_vox", S::simulate, p.center_offset_vox),
      range("population", "outer_radius_mm", S::simulate, p.outer_radius_mm),
      range("population", "wall_thickness_mm", S::simulate, p.wall_thickness_mm),
      range("population", "apex_z_mm", S::simulate, p.apex_z_mm),
      range("population", "base_z_mm", S::simulate, p.base_z_mm),
      range("population", "wall_activity", S::simulate, p.wall_activity),
      range("population", "background_activity", S::simulate, p.background_activity),
      range("population", "tilt_deg", S::simulate, p.tilt_deg),
      Field{"population", "defect_locations", [&p] {
              std::vector<std::string> n;
              for (auto l : p.defects.locations) n.push_back(to_string(l));
              return join(n, ", ");
            },
            [&p](const std::string& s) {
              p.defects.locations.clear();
              for (const auto& n : split(s, ',')) p.defects.locations.push_back(parse_wall_location(n));
            },
            S::simulate},
      Field{"population", "defect_weights", [&p] {
              std::vector<std::string> n;
              for (double w : p.defects.weights) n.push_back(format_double(w));
              return join(n, ", ");
            },
            [&p](const std::string& s) {
              p.defects.weights.clear();
              for (const auto& n : split(s, ',')) p.defects.weights.push_back(parse_double(n));
            },
            S::simulate},
      num("population", "defect_extent_deg", S::simulate, p.defects.extent_deg),
      num("population", "defect_severity", S::simulate, p.defects.severity_frac),
      num("population", "defect_axial_slices", S::simulate, p.defects.axial_extent_slices),
      range("population", "defect_angle_jitter_deg", S::simulate, p.defects.angle_jitter_deg),
      num("protocol", "n_full_angles", S::simulate, c.protocol.n_full_angles),
      num("protocol", "n_sparse_angles", S::simulate, c.protocol.n_sparse_angles),
      num("protocol", "span_deg", S::simulate, c.protocol.span_deg),
      num("protocol", "start_deg", S::simulate, c.protocol.start_deg),
      num("protocol", "counts_per_view", S::simulate, c.protocol.counts_per_view),
      num("recon", "iterations_full", S::reconstruct, c.recon.full.n_iterations),
      num("recon", "subsets_full", S::reconstruct, c.recon.full.n_subsets),
      num("recon", "iterations_sparse", S::reconstruct, c.recon.sparse.n_iterations),
      num("recon", "subsets_sparse", S::reconstruct, c.recon.sparse.n_subsets),
      num("recon", "crop_size", S::reconstruct, c.recon.crop_size),
      Field{"channels", "passbands", [&c] {
              std::vector<std::string> n;
              for (const auto& b : c.passbands) n.push_back(format_double(b.lo) + ":" + format_double(b.hi));
              return join(n, ", ");
            },
            [&c](const std::string& s) {
              c.passbands.clear();
              for (const auto& item : split(s, ',')) {
                const auto lh = split(item, ':');
                if (lh.size() != 2) throw std::invalid_argument("passband must be 'lo:hi', got '" + item + "'");
                c.passbands.push_back({parse_double(lh[0]), parse_double(lh[1])});
              }
            },
            S::train},
      num("network", "width1", S::train, c.network.width1),
      num("network", "width2", S::train, c.network.width2),
      num("network", "width3", S::train, c.network.width3),
      num("network", "final_gain", S::train, c.network.final_gain),
      num("loss", "lambda", S::train, c.loss.lambda),
      flag("loss", "normalize_channel_term", S::train, c.loss.normalize_channel_term),
      flag("loss", "calibrate_lambda", S::train, c.loss.calibrate_lambda),
      choice("loss", "slice_range", S::train, c.loss.slice_range_mode,
             {{nn::SliceRangeMode::per_sample_meta, "per_sample"}, {nn::SliceRangeMode::fixed, "fixed"}}),
      num("loss", "slice_lo", S::train, c.loss.fixed_slice_lo),
      num("loss", "slice_hi", S::train, c.loss.fixed_slice_hi),
      choice("loss", "absent_shift", S::train, c.loss.absent_shift,
             {{nn::AbsentShift::signal_location, "signal_location"}, {nn::AbsentShift::lv_center, "lv_center"}}),
      num("train", "learning_rate", S::train, c.train.learning_rate),
      num("train", "beta1", S::train, c.train.beta1),
      num("train", "beta2", S::train, c.train.beta2),
      num("train", "eps", S::train, c.train.eps),
      num("train", "batch_size", S::train, c.train.batch_size),
      num("train", "n_epochs", S::train, c.train.n_epochs),
      num("train", "seed", S::train, c.train.seed),
      choice("train", "normalization", S::train, c.train.normalization,
             {{nn::Normalization::train_mean, "train_mean"}, {nn::Normalization::none, "none"}}),
      num("train", "n_folds", S::train, c.n_folds),
      num("observer", "ridge_fraction", S::evaluate, c.observer.ridge_fraction),
      num("observer", "train_fraction", S::evaluate, c.observer.train_fraction),
      choice("observer", "absent_location", S::evaluate, c.observer.absent_location,
             {{FeatureLocation::signal_location, "signal_location"}, {FeatureLocation::lv_center, "lv_center"}}),
  };
  return f;
}

// Thread count changes wall time only, never results; it stays out of the
// hash and out of the canonical text.
constexpr const char* kThreadsSection = "experiment";
constexpr const char* kThreadsKey = "n_threads";

}  // namespace

void ExperimentConfig::validate() const {
  if (n_threads < 1) throw std::invalid_argument("config: n_threads must be >= 1");
  const auto& d = dataset;
  if (d.n_train < 1 || d.n_eval < 2) throw std::invalid_argument("config: dataset sizes too small");
  if (d.n_train_present < 0 || d.n_train_present > d.n_train || d.n_eval_present < 1 ||
      d.n_eval_present >= d.n_eval) {
    throw std::invalid_argument("config: present counts must lie within the split sizes (eval needs both classes)");
  }
  population.validate();
  if (protocol.n_full_angles < 1 || protocol.n_sparse_angles < 1 || protocol.n_sparse_angles > protocol.n_full_angles) {
    throw std::invalid_argument("config: need 1 <= n_sparse_angles <= n_full_angles");
  }
  if (!(protocol.span_deg > 0.0) || !(protocol.counts_per_view > 0.0)) {
    throw std::invalid_argument("config: span_deg and counts_per_view must be positive");
  }
  recon.full.validate(static_cast<std::size_t>(protocol.n_full_angles));
  recon.sparse.validate(static_cast<std::size_t>(protocol.n_sparse_angles));
  if (recon.crop_size < 4 || recon.crop_size % 4 != 0) {
    throw std::invalid_argument("config: crop_size must be a positive multiple of 4");
  }
  if (recon.crop_size > population.dims.nx || recon.crop_size > population.dims.ny ||
      recon.crop_size > population.dims.nz) {
    throw std::invalid_argument("config: crop_size exceeds the simulation grid");
  }
  ChannelBank(recon.crop_size, recon.crop_size, passbands);
  nn::Architecture::encoder_decoder(network.width1, network.width2, network.width3).validate();
  if (!std::isfinite(network.final_gain)) throw std::invalid_argument("config: final_gain must be finite");
  if (!(loss.lambda >= 0.0)) throw std::invalid_argument("config: lambda must be >= 0");
  if (loss.slice_range_mode == nn::SliceRangeMode::fixed &&
      !(loss.fixed_slice_lo >= 0 && loss.fixed_slice_lo <= loss.fixed_slice_hi && loss.fixed_slice_hi < recon.crop_size)) {
    throw std::invalid_argument("config: fixed slice range must lie inside the crop");
  }
  train.validate();
  if (!(train.learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate must be > 0");
  if (n_folds < 2 || n_folds > d.n_train) throw std::invalid_argument("config: need 2 <= n_folds <= n_train");
  if (!(observer.ridge_fraction >= 0.0)) throw std::invalid_argument("config: ridge_fraction must be >= 0");
  if (!(observer.train_fraction > 0.0 && observer.train_fraction < 1.0)) {
    throw std::invalid_argument("config: observer train_fraction must be in (0, 1)");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  std::map<std::pair<std::string, std::string>, Field*> index;
  auto all = fields(cfg);
  for (auto& f : all) index[{f.section, f.key}] = &f;

  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw std::invalid_argument("config: key '" + section + "' outside any section");
    }
    for (const auto& [key, value] : body) {
      const std::string v = trim(value.data());
      if (section == kThreadsSection && key == kThreadsKey) {
        cfg.n_threads = static_cast<int>(parse_int(v));
        continue;
      }
      const auto it = index.find({section, key});
      if (it == index.end()) throw std::invalid_argument("config: unknown setting [" + section + "] " + key);
      try {
        it->second->set(v);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config: [" + section + "] " + key + ": " + e.what());
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

namespace {

std::string render(const ExperimentConfig& cfg, std::optional<Stage> upto) {
  ExperimentConfig copy = cfg;
  std::string out;
  std::string section;
  for (const auto& f : fields(copy)) {
    if (upto && static_cast<int>(f.stage) > static_cast<int>(*upto)) continue;
    if (f.section != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace

std::string to_ini(const ExperimentConfig& cfg) { return render(cfg, std::nullopt); }

std::string to_string(Stage s) {
  switch (s) {
    case Stage::simulate: return "simulate";
    case Stage::reconstruct: return "reconstruct";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

std::string stage_hash(const ExperimentConfig& cfg, Stage s) { return sha256_hex(render(cfg, s)); }

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(to_ini(cfg)); }

namespace {

class Digest {
 public:
  Digest() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failed");
  }
  ~Digest() { EVP_MD_CTX_free(ctx_); }
  Digest(const Digest&) = delete;
  Digest& operator=(const Digest&) = delete;

  void update(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, p, n) != 1) throw std::runtime_error("sha256: update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw std::runtime_error("sha256: final failed");
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Digest d;
  d.update(bytes.data(), bytes.size());
  return d.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("sha256: cannot open " + path.string());
  Digest d;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return d.hex();
}

}  // namespace sparsespect::harness
