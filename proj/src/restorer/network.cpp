#include "sparsespect/restorer/network.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "sparsespect/rng.hpp"

namespace sparsespect::nn {

namespace {

Dims3 conv_out_dims(const Dims3& in, int kernel, int stride) {
  const int p = kernel / 2;
  auto o = [&](int n) { return (n + 2 * p - kernel) / stride + 1; };
  return {o(in.nx), o(in.ny), o(in.nz)};
}

/// Zero-padded copy of `in` with `p` voxels on every side.
struct Padded {
  int c, px, py, pz;
  std::vector<double> data;

  Padded(const Tensor& in, int p)
      : c(in.channels), px(in.dims.nx + 2 * p), py(in.dims.ny + 2 * p), pz(in.dims.nz + 2 * p) {
    data.assign(static_cast<std::size_t>(c) * px * py * pz, 0.0);
    const Dims3& d = in.dims;
    for (int ch = 0; ch < c; ++ch)
      for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y) {
          const double* src = in.channel(ch) + (static_cast<std::size_t>(z) * d.ny + y) * d.nx;
          std::copy(src, src + d.nx, row(ch, z + p, y + p) + p);
        }
  }
  Padded(int channels, const Dims3& d, int p)
      : c(channels), px(d.nx + 2 * p), py(d.ny + 2 * p), pz(d.nz + 2 * p) {
    data.assign(static_cast<std::size_t>(c) * px * py * pz, 0.0);
  }

  double* row(int ch, int z, int y) {
    return data.data() + ((static_cast<std::size_t>(ch) * pz + z) * py + y) * px;
  }
  const double* row(int ch, int z, int y) const {
    return data.data() + ((static_cast<std::size_t>(ch) * pz + z) * py + y) * px;
  }
};

template <int S>
double dot_strided(const double* g, const double* r, int n) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  int x = 0;
  for (; x + 4 <= n; x += 4) {
    a0 += g[x] * r[x * S];
    a1 += g[x + 1] * r[(x + 1) * S];
    a2 += g[x + 2] * r[(x + 2) * S];
    a3 += g[x + 3] * r[(x + 3) * S];
  }
  for (; x < n; ++x) a0 += g[x] * r[x * S];
  return (a0 + a1) + (a2 + a3);
}

template <int S>
void conv_forward_impl(const Padded& pin, const ConvBlock& blk, bool relu, Tensor& out) {
  const int k = blk.kernel;
  const int ci = blk.in_ch;
  const Dims3& od = out.dims;
  std::vector<double> acc(static_cast<std::size_t>(od.nx));
  for (int o = 0; o < blk.out_ch; ++o) {
    double* dst = out.channel(o);
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y) {
        std::fill(acc.begin(), acc.end(), blk.bias[static_cast<std::size_t>(o)]);
        for (int i = 0; i < ci; ++i) {
          const double* wv = blk.weight.data() + static_cast<std::size_t>(o * ci + i) * k * k * k;
          for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky) {
              const double* r = pin.row(i, z * S + kz, y * S + ky);
              const double* w = wv + (kz * k + ky) * k;
              if (k == 3) {
                const double w0 = w[0], w1 = w[1], w2 = w[2];
                for (int x = 0; x < od.nx; ++x) acc[x] += w0 * r[x * S] + w1 * r[x * S + 1] + w2 * r[x * S + 2];
              } else {
                for (int kx = 0; kx < k; ++kx) {
                  const double wk = w[kx];
                  for (int x = 0; x < od.nx; ++x) acc[x] += wk * r[x * S + kx];
                }
              }
            }
        }
        double* orow = dst + (static_cast<std::size_t>(z) * od.ny + y) * od.nx;
        if (relu) {
          for (int x = 0; x < od.nx; ++x) orow[x] = acc[x] > 0.0 ? acc[x] : 0.0;
        } else {
          std::copy(acc.begin(), acc.end(), orow);
        }
      }
  }
}

template <int S>
void conv_backward_impl(const Padded& pin, const ConvBlock& blk, const Tensor& gout, ConvBlock& gblk, Padded* gpad) {
  const int k = blk.kernel;
  const int ci = blk.in_ch;
  const Dims3& od = gout.dims;
  for (int o = 0; o < blk.out_ch; ++o) {
    const double* gsrc = gout.channel(o);
    double gb = 0.0;
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y) {
        const double* g = gsrc + (static_cast<std::size_t>(z) * od.ny + y) * od.nx;
        bool any = false;
        double row_sum = 0.0;
        for (int x = 0; x < od.nx; ++x) {
          row_sum += g[x];
          any = any || g[x] != 0.0;
        }
        gb += row_sum;
        if (!any) continue;
        for (int i = 0; i < ci; ++i) {
          const std::size_t wbase = static_cast<std::size_t>(o * ci + i) * k * k * k;
          const double* wv = blk.weight.data() + wbase;
          double* gw = gblk.weight.data() + wbase;
          for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky) {
              const double* r = pin.row(i, z * S + kz, y * S + ky);
              const int woff = (kz * k + ky) * k;
              for (int kx = 0; kx < k; ++kx) gw[woff + kx] += dot_strided<S>(g, r + kx, od.nx);
              if (gpad) {
                double* gr = gpad->row(i, z * S + kz, y * S + ky);
                for (int kx = 0; kx < k; ++kx) {
                  const double wk = wv[woff + kx];
                  for (int x = 0; x < od.nx; ++x) gr[x * S + kx] += wk * g[x];
                }
              }
            }
        }
      }
    gblk.bias[static_cast<std::size_t>(o)] += gb;
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.data.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

std::vector<int> conv_node_blocks(const Architecture& arch) {
  std::vector<int> blk(arch.nodes.size(), -1);
  int b = 0;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    if (arch.nodes[i].kind == NodeKind::conv) blk[i] = b++;
  }
  return blk;
}

}  // namespace

Architecture Architecture::encoder_decoder(int w1, int w2, int w3) {
  auto conv = [](int src, int out, int stride = 1, int kernel = 3, bool relu = true) {
    NodeSpec n;
    n.kind = NodeKind::conv;
    n.src_a = src;
    n.out_ch = out;
    n.stride = stride;
    n.kernel = kernel;
    n.relu = relu;
    return n;
  };
  auto up = [](int src) {
    NodeSpec n;
    n.kind = NodeKind::upsample;
    n.src_a = src;
    return n;
  };
  auto cat = [](int a, int b) {
    NodeSpec n;
    n.kind = NodeKind::concat;
    n.src_a = a;
    n.src_b = b;
    return n;
  };
  Architecture a;
  a.nodes = {
      NodeSpec{},        // 0 input
      conv(0, w1),       // 1
      conv(1, w1),       // 2  skip at full resolution
      conv(2, w2, 2),    // 3
      conv(3, w2),       // 4  skip at half resolution
      conv(4, w3, 2),    // 5
      conv(5, w3),       // 6
      up(6),             // 7
      conv(7, w2),       // 8
      cat(8, 4),         // 9
      conv(9, w2),       // 10
      up(10),            // 11
      conv(11, w1),      // 12
      cat(12, 2),        // 13
      conv(13, w1),      // 14
      conv(14, 1, 1, 1, false),  // 15
  };
  NodeSpec out;
  out.kind = NodeKind::residual_out;
  out.src_a = 15;
  a.nodes.push_back(out);
  return a;
}

Architecture Architecture::single_conv(int kernel) {
  Architecture a;
  NodeSpec c;
  c.kind = NodeKind::conv;
  c.src_a = 0;
  c.out_ch = 1;
  c.kernel = kernel;
  NodeSpec out;
  out.kind = NodeKind::residual_out;
  out.src_a = 1;
  a.nodes = {NodeSpec{}, c, out};
  return a;
}

std::vector<int> Architecture::node_channels() const {
  std::vector<int> ch(nodes.size(), 0);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const NodeSpec& n = nodes[i];
    switch (n.kind) {
      case NodeKind::input: ch[i] = 1; break;
      case NodeKind::conv: ch[i] = n.out_ch; break;
      case NodeKind::upsample: ch[i] = ch[static_cast<std::size_t>(n.src_a)]; break;
      case NodeKind::concat:
        ch[i] = ch[static_cast<std::size_t>(n.src_a)] + ch[static_cast<std::size_t>(n.src_b)];
        break;
      case NodeKind::residual_out: ch[i] = 1; break;
    }
  }
  return ch;
}

int Architecture::required_divisor() const {
  // Scale factor of every node relative to the input; upsampling must undo
  // every downsampling for the residual and skip connections to line up.
  std::vector<int> down(nodes.size(), 1);
  int worst = 1;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const NodeSpec& n = nodes[i];
    const int src = down[static_cast<std::size_t>(n.src_a)];
    if (n.kind == NodeKind::conv) down[i] = src * n.stride;
    else if (n.kind == NodeKind::upsample) down[i] = src / 2;
    else down[i] = src;
    worst = std::max(worst, down[i]);
  }
  return worst;
}

void Architecture::validate() const {
  if (nodes.size() < 2 || nodes.front().kind != NodeKind::input) {
    throw std::invalid_argument("Architecture: node 0 must be the input");
  }
  if (nodes.back().kind != NodeKind::residual_out) {
    throw std::invalid_argument("Architecture: last node must be residual_out");
  }
  std::vector<int> down(nodes.size(), 1);
  const auto ch = node_channels();
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const NodeSpec& n = nodes[i];
    auto bad = [&](const std::string& why) {
      return std::invalid_argument("Architecture: node " + std::to_string(i) + ": " + why);
    };
    if (n.kind == NodeKind::input) throw bad("only node 0 may be an input");
    if (n.src_a < 0 || static_cast<std::size_t>(n.src_a) >= i) throw bad("source must be an earlier node");
    const int sa = down[static_cast<std::size_t>(n.src_a)];
    switch (n.kind) {
      case NodeKind::conv:
        if (n.kernel != 1 && n.kernel != 3) throw bad("kernel must be 1 or 3");
        if (n.stride != 1 && n.stride != 2) throw bad("stride must be 1 or 2");
        if (n.out_ch <= 0) throw bad("out_ch must be positive");
        down[i] = sa * n.stride;
        break;
      case NodeKind::upsample:
        if (sa < 2) throw bad("upsampling above input resolution");
        down[i] = sa / 2;
        break;
      case NodeKind::concat:
        if (n.src_b < 0 || static_cast<std::size_t>(n.src_b) >= i) throw bad("second source must be an earlier node");
        if (down[static_cast<std::size_t>(n.src_b)] != sa) throw bad("concatenated sources differ in resolution");
        down[i] = sa;
        break;
      case NodeKind::residual_out:
        if (i + 1 != nodes.size()) throw bad("residual_out must be last");
        if (sa != 1 || ch[static_cast<std::size_t>(n.src_a)] != 1) throw bad("residual source must be 1 channel at input resolution");
        down[i] = 1;
        break;
      case NodeKind::input: break;
    }
  }
}

std::size_t NetParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.weight.size() + b.bias.size();
  return n;
}

std::vector<std::span<double>> NetParams::tensors() {
  std::vector<std::span<double>> t;
  for (auto& b : blocks) {
    t.emplace_back(b.weight);
    t.emplace_back(b.bias);
  }
  return t;
}

std::vector<std::span<const double>> NetParams::tensors() const {
  std::vector<std::span<const double>> t;
  for (const auto& b : blocks) {
    t.emplace_back(b.weight);
    t.emplace_back(b.bias);
  }
  return t;
}

NetParams NetParams::zeros_like() const {
  NetParams z = *this;
  for (auto& b : z.blocks) {
    std::fill(b.weight.begin(), b.weight.end(), 0.0);
    std::fill(b.bias.begin(), b.bias.end(), 0.0);
  }
  return z;
}

bool NetParams::all_finite() const {
  for (const auto& t : tensors())
    for (double v : t)
      if (!std::isfinite(v)) return false;
  return true;
}

NetParams init_params(const Architecture& arch, std::uint64_t seed, double final_gain) {
  arch.validate();
  const auto ch = arch.node_channels();
  NetParams p;
  p.arch = arch;
  int last_conv = -1;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    if (arch.nodes[i].kind == NodeKind::conv) last_conv = static_cast<int>(i);
  }
  int b = 0;
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const NodeSpec& n = arch.nodes[i];
    if (n.kind != NodeKind::conv) continue;
    ConvBlock blk;
    blk.in_ch = ch[static_cast<std::size_t>(n.src_a)];
    blk.out_ch = n.out_ch;
    blk.kernel = n.kernel;
    blk.weight.resize(static_cast<std::size_t>(blk.out_ch) * blk.fan_in());
    blk.bias.assign(static_cast<std::size_t>(blk.out_ch), 0.0);
    const double limit = std::sqrt(6.0 / static_cast<double>(blk.fan_in()));
    const double gain = static_cast<int>(i) == last_conv ? final_gain : 1.0;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    for (double& w : blk.weight) w = gain * rng.uniform(-limit, limit);
    p.blocks.push_back(std::move(blk));
    ++b;
  }
  return p;
}

void conv3d_forward(const Tensor& in, const ConvBlock& blk, int stride, bool relu, Tensor& out) {
  if (in.channels != blk.in_ch) throw std::invalid_argument("conv3d_forward: channel mismatch");
  out = Tensor(blk.out_ch, conv_out_dims(in.dims, blk.kernel, stride));
  const Padded pin(in, blk.kernel / 2);
  if (stride == 1) conv_forward_impl<1>(pin, blk, relu, out);
  else if (stride == 2) conv_forward_impl<2>(pin, blk, relu, out);
  else throw std::invalid_argument("conv3d_forward: stride must be 1 or 2");
}

void conv3d_backward(const Tensor& in, const ConvBlock& blk, int stride, const Tensor& grad_out, ConvBlock& grad_blk,
                     Tensor* grad_in) {
  const int p = blk.kernel / 2;
  const Padded pin(in, p);
  std::optional<Padded> gpad;
  if (grad_in) gpad.emplace(in.channels, in.dims, p);
  Padded* gp = gpad ? &*gpad : nullptr;
  if (stride == 1) conv_backward_impl<1>(pin, blk, grad_out, grad_blk, gp);
  else if (stride == 2) conv_backward_impl<2>(pin, blk, grad_out, grad_blk, gp);
  else throw std::invalid_argument("conv3d_backward: stride must be 1 or 2");
  if (!grad_in) return;

  Tensor g(in.channels, in.dims);
  const Dims3& d = in.dims;
  for (int ch = 0; ch < in.channels; ++ch)
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y) {
        const double* src = gpad->row(ch, z + p, y + p) + p;
        std::copy(src, src + d.nx, g.channel(ch) + (static_cast<std::size_t>(z) * d.ny + y) * d.nx);
      }
  add_into(*grad_in, g);
}

void upsample2_forward(const Tensor& in, Tensor& out) {
  const Dims3& d = in.dims;
  out = Tensor(in.channels, {2 * d.nx, 2 * d.ny, 2 * d.nz});
  const Dims3& od = out.dims;
  for (int c = 0; c < in.channels; ++c) {
    const double* src = in.channel(c);
    double* dst = out.channel(c);
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y) {
        const double* srow = src + (static_cast<std::size_t>(z / 2) * d.ny + y / 2) * d.nx;
        double* drow = dst + (static_cast<std::size_t>(z) * od.ny + y) * od.nx;
        for (int x = 0; x < od.nx; ++x) drow[x] = srow[x / 2];
      }
  }
}

void upsample2_backward(const Tensor& grad_out, Tensor& grad_in) {
  const Dims3& od = grad_out.dims;
  Tensor g(grad_out.channels, {od.nx / 2, od.ny / 2, od.nz / 2});
  const Dims3& d = g.dims;
  for (int c = 0; c < g.channels; ++c) {
    const double* src = grad_out.channel(c);
    double* dst = g.channel(c);
    for (int z = 0; z < od.nz; ++z)
      for (int y = 0; y < od.ny; ++y) {
        const double* srow = src + (static_cast<std::size_t>(z) * od.ny + y) * od.nx;
        double* drow = dst + (static_cast<std::size_t>(z / 2) * d.ny + y / 2) * d.nx;
        for (int x = 0; x < od.nx; ++x) drow[x / 2] += srow[x];
      }
  }
  add_into(grad_in, g);
}

Volume3D net_forward(const NetParams& params, const Volume3D& input) {
  ForwardTape tape;
  return net_forward(params, input, tape);
}

Volume3D net_forward(const NetParams& params, const Volume3D& input, ForwardTape& tape) {
  const Architecture& arch = params.arch;
  const int div = arch.required_divisor();
  const Dims3& d = input.dims();
  if (d.nx % div != 0 || d.ny % div != 0 || d.nz % div != 0) {
    throw std::invalid_argument("net_forward: input dims " + to_string(d) + " must be divisible by " +
                                std::to_string(div));
  }
  const auto blk_of = conv_node_blocks(arch);
  tape.acts.assign(arch.nodes.size(), Tensor{});
  Tensor& in = tape.acts[0];
  in = Tensor(1, d);
  std::copy(input.data().begin(), input.data().end(), in.data.begin());

  for (std::size_t i = 1; i < arch.nodes.size(); ++i) {
    const NodeSpec& n = arch.nodes[i];
    const Tensor& a = tape.acts[static_cast<std::size_t>(n.src_a)];
    Tensor& out = tape.acts[i];
    switch (n.kind) {
      case NodeKind::conv:
        conv3d_forward(a, params.blocks.at(static_cast<std::size_t>(blk_of[i])), n.stride, n.relu, out);
        break;
      case NodeKind::upsample: upsample2_forward(a, out); break;
      case NodeKind::concat: {
        const Tensor& b = tape.acts[static_cast<std::size_t>(n.src_b)];
        out = Tensor(a.channels + b.channels, a.dims);
        std::copy(a.data.begin(), a.data.end(), out.data.begin());
        std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
        break;
      }
      case NodeKind::residual_out:
        out = a;
        for (std::size_t v = 0; v < out.data.size(); ++v) out.data[v] += in.data[v];
        break;
      case NodeKind::input: break;
    }
  }
  return Volume3D(d, input.voxel_mm(), tape.acts.back().data);
}

void net_backprop(const NetParams& params, const ForwardTape& tape, std::span<const double> grad_output,
                  NetParams& grads) {
  const Architecture& arch = params.arch;
  const auto blk_of = conv_node_blocks(arch);
  std::vector<Tensor> g(arch.nodes.size());
  g.back() = Tensor(1, tape.acts.back().dims);
  if (grad_output.size() != g.back().data.size()) throw std::invalid_argument("net_backprop: gradient size mismatch");
  std::copy(grad_output.begin(), grad_output.end(), g.back().data.begin());

  for (std::size_t i = arch.nodes.size() - 1; i >= 1; --i) {
    const NodeSpec& n = arch.nodes[i];
    Tensor& gi = g[i];
    if (gi.data.empty()) continue;
    const auto src = static_cast<std::size_t>(n.src_a);
    switch (n.kind) {
      case NodeKind::residual_out: add_into(g[src], gi); break;
      case NodeKind::conv: {
        if (n.relu) {
          const auto& act = tape.acts[i].data;
          for (std::size_t v = 0; v < gi.data.size(); ++v)
            if (act[v] <= 0.0) gi.data[v] = 0.0;
        }
        const auto b = static_cast<std::size_t>(blk_of[i]);
        conv3d_backward(tape.acts[src], params.blocks[b], n.stride, gi, grads.blocks[b], src == 0 ? nullptr : &g[src]);
        break;
      }
      case NodeKind::upsample: upsample2_backward(gi, g[src]); break;
      case NodeKind::concat: {
        const Tensor& a = tape.acts[src];
        const auto srcb = static_cast<std::size_t>(n.src_b);
        Tensor ga(a.channels, a.dims);
        Tensor gb(tape.acts[srcb].channels, a.dims);
        std::copy(gi.data.begin(), gi.data.begin() + static_cast<std::ptrdiff_t>(ga.data.size()), ga.data.begin());
        std::copy(gi.data.begin() + static_cast<std::ptrdiff_t>(ga.data.size()), gi.data.end(), gb.data.begin());
        add_into(g[src], ga);
        add_into(g[srcb], gb);
        break;
      }
      case NodeKind::input: break;
    }
    gi = Tensor{};
  }
}

}  // namespace sparsespect::nn
