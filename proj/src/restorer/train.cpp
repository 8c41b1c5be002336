#include "sparsespect/restorer/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include "sparsespect/rng.hpp"
#include "sparsespect/text.hpp"

namespace sparsespect::nn {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("TrainConfig: eps must be > 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (n_epochs < 0) throw std::invalid_argument("TrainConfig: n_epochs must be >= 0");
  if (n_threads < 1) throw std::invalid_argument("TrainConfig: n_threads must be >= 1");
}

void parallel_for(int n, int n_threads, const std::function<void(int)>& body) {
  if (n_threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (int i = next++; i < n && !failed; i = next++) {
      try {
        body(i);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  const int workers = std::min(n, n_threads);
  for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

BackwardResult net_backward(const NetParams& params, const Volume3D& input, const Volume3D& truth,
                            const SampleMeta& meta, const LossConfig& cfg) {
  ForwardTape tape;
  const Volume3D est = net_forward(params, input, tape);
  std::vector<double> grad_out;
  BackwardResult r{hybrid_loss_grad(est, truth, meta, cfg, grad_out), params.zeros_like()};
  net_backprop(params, tape, grad_out, r.grads);
  return r;
}

LossTerms evaluate_loss(const NetParams& params, const std::vector<TrainingSample>& data, const LossConfig& cfg,
                        int n_threads) {
  std::vector<LossTerms> terms(data.size());
  parallel_for(static_cast<int>(data.size()), n_threads, [&](int i) {
    const auto& s = data[static_cast<std::size_t>(i)];
    terms[static_cast<std::size_t>(i)] = hybrid_loss(net_forward(params, s.input), s.target, s.meta, cfg);
  });
  return mean_terms(terms);
}

namespace {

void adam_step(NetParams& params, const NetParams& grads, AdamState& st, const TrainConfig& cfg) {
  const std::size_t n = params.parameter_count();
  if (st.m.size() != n) {
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  auto pt = params.tensors();
  const auto gt = grads.tensors();
  std::size_t k = 0;
  for (std::size_t t = 0; t < pt.size(); ++t) {
    for (std::size_t i = 0; i < pt[t].size(); ++i, ++k) {
      const double g = gt[t][i];
      st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * g;
      st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = st.m[k] / bc1;
      const double vhat = st.v[k] / bc2;
      pt[t][i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void accumulate(NetParams& into, const NetParams& g, double scale) {
  auto a = into.tensors();
  const auto b = g.tensors();
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) a[t][i] += scale * b[t][i];
}

}  // namespace

TrainState train(const std::vector<TrainingSample>& data, TrainState state, const LossConfig& loss_cfg,
                 const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  loss_cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const Dims3 dims = data.front().input.dims();
  for (const auto& s : data) {
    if (s.input.dims() != dims || s.target.dims() != dims) throw std::invalid_argument("train: samples differ in dims");
  }
  state.params.arch.validate();

  const int n = static_cast<int>(data.size());
  for (int epoch = state.epochs_done; epoch < cfg.n_epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);

    std::vector<LossTerms> epoch_terms;
    epoch_terms.reserve(static_cast<std::size_t>(n));
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::vector<BackwardResult> results(static_cast<std::size_t>(count));
      parallel_for(count, cfg.n_threads, [&](int b) {
        const auto& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
        results[static_cast<std::size_t>(b)] = net_backward(state.params, s.input, s.target, s.meta, loss_cfg);
      });
      // Fixed summation order keeps the update independent of thread count.
      NetParams grad = state.params.zeros_like();
      for (int b = 0; b < count; ++b) {
        const auto& r = results[static_cast<std::size_t>(b)];
        if (!std::isfinite(r.loss.total)) {
          const auto& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(start + b)])];
          throw TrainingDivergedError("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                      std::to_string(state.adam.step) + ", sample " + std::to_string(s.meta.sample_id));
        }
        accumulate(grad, r.grads, 1.0 / count);
        epoch_terms.push_back(r.loss);
      }
      adam_step(state.params, grad, state.adam, cfg);
      if (!state.params.all_finite()) {
        throw TrainingDivergedError("train: non-finite parameters after step " + std::to_string(state.adam.step));
      }
    }
    const LossTerms m = mean_terms(epoch_terms);
    state.history.push_back({epoch, m.total, m.fidelity, m.channel});
    state.epochs_done = epoch + 1;
    if (on_epoch) on_epoch(state);
  }
  return state;
}

double mean_intensity(const std::vector<const Volume3D*>& volumes) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto* v : volumes) {
    sum += v->sum();
    count += v->size();
  }
  if (count == 0) throw std::invalid_argument("mean_intensity: no voxels");
  return sum / static_cast<double>(count);
}

// --- checkpoint I/O ---------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw std::runtime_error("write_checkpoint: cannot open " + path.string());
  }
  template <class T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void put_doubles(std::span<const double> v) {
    put<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write_checkpoint: write failed for " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("read_checkpoint: cannot open " + path.string());
  }
  template <class T>
  T get() {
    T v{};
    if (!in_.read(reinterpret_cast<char*>(&v), sizeof v)) {
      throw FormatError("read_checkpoint: truncated file " + path_.string());
    }
    return v;
  }
  std::vector<double> get_doubles() {
    const auto n = get<std::uint64_t>();
    if (n > (1ull << 32)) throw FormatError("read_checkpoint: implausible array length in " + path_.string());
    std::vector<double> v(n);
    if (!in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw FormatError("read_checkpoint: truncated payload in " + path_.string());
    }
    return v;
  }
  void read_magic() {
    char magic[4];
    if (!in_.read(magic, 4) || std::memcmp(magic, "SPCK", 4) != 0) {
      throw FormatError("read_checkpoint: bad magic in " + path_.string());
    }
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const TrainState& st = ckpt.state;
  Writer w(path);
  const char magic[4] = {'S', 'P', 'C', 'K'};
  for (char c : magic) w.put(c);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(st.params.arch.nodes.size()));
  for (const auto& n : st.params.arch.nodes) {
    w.put<std::int32_t>(static_cast<std::int32_t>(n.kind));
    w.put<std::int32_t>(n.src_a);
    w.put<std::int32_t>(n.src_b);
    w.put<std::int32_t>(n.out_ch);
    w.put<std::int32_t>(n.kernel);
    w.put<std::int32_t>(n.stride);
    w.put<std::int32_t>(n.relu ? 1 : 0);
  }
  w.put<double>(ckpt.normalization_scale);
  w.put<std::int32_t>(st.epochs_done);
  w.put<std::int64_t>(st.adam.step);
  std::vector<double> flat;
  flat.reserve(st.params.parameter_count());
  for (const auto& t : st.params.tensors()) flat.insert(flat.end(), t.begin(), t.end());
  w.put_doubles(flat);
  w.put_doubles(st.adam.m);
  w.put_doubles(st.adam.v);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(st.history.size()));
  for (const auto& h : st.history) {
    w.put<std::int32_t>(h.epoch);
    w.put<double>(h.total);
    w.put<double>(h.fidelity);
    w.put<double>(h.channel);
  }
  w.finish();
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  r.read_magic();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("read_checkpoint: unsupported version " + std::to_string(version) + " in " + path.string());
  }
  Architecture arch;
  const auto n_nodes = r.get<std::uint32_t>();
  if (n_nodes > 4096) throw FormatError("read_checkpoint: implausible node count");
  for (std::uint32_t i = 0; i < n_nodes; ++i) {
    NodeSpec n;
    n.kind = static_cast<NodeKind>(r.get<std::int32_t>());
    n.src_a = r.get<std::int32_t>();
    n.src_b = r.get<std::int32_t>();
    n.out_ch = r.get<std::int32_t>();
    n.kernel = r.get<std::int32_t>();
    n.stride = r.get<std::int32_t>();
    n.relu = r.get<std::int32_t>() != 0;
    arch.nodes.push_back(n);
  }
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("read_checkpoint: ") + e.what());
  }

  Checkpoint ck;
  ck.normalization_scale = r.get<double>();
  ck.state.epochs_done = r.get<std::int32_t>();
  ck.state.adam.step = r.get<std::int64_t>();
  const auto flat = r.get_doubles();
  ck.state.adam.m = r.get_doubles();
  ck.state.adam.v = r.get_doubles();

  // Shapes come from the architecture; the payload must fill them exactly.
  ck.state.params = init_params(arch, 0);
  if (flat.size() != ck.state.params.parameter_count()) {
    throw FormatError("read_checkpoint: parameter payload does not match architecture in " + path.string());
  }
  std::size_t k = 0;
  for (auto t : ck.state.params.tensors())
    for (double& v : t) v = flat[k++];
  const auto n_hist = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_hist; ++i) {
    EpochRecord h;
    h.epoch = r.get<std::int32_t>();
    h.total = r.get<double>();
    h.fidelity = r.get<double>();
    h.channel = r.get<double>();
    ck.state.history.push_back(h);
  }
  return ck;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_history_csv: cannot open " + path.string());
  out << "epoch,total,fidelity,channel\n";
  for (const auto& h : history) {
    out << h.epoch << ',' << format_double(h.total) << ',' << format_double(h.fidelity) << ','
        << format_double(h.channel) << '\n';
  }
}

}  // namespace sparsespect::nn
