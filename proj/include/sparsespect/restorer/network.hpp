#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sparsespect/volume.hpp"

namespace sparsespect::nn {

enum class NodeKind : std::int32_t { input = 0, conv = 1, upsample = 2, concat = 3, residual_out = 4 };

/// One node of the network graph. Sources always refer to earlier nodes.
struct NodeSpec {
  NodeKind kind = NodeKind::input;
  int src_a = -1;
  int src_b = -1;  // concat only
  int out_ch = 1;  // conv only
  int kernel = 3;  // conv only, 1 or 3
  int stride = 1;  // conv only, 1 or 2
  bool relu = false;

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

/// Network graph. Node 0 is the single-channel input; the last node is a
/// residual_out that adds the input to its (single-channel) source.
struct Architecture {
  std::vector<NodeSpec> nodes;

  /// 3-level 3D encoder-decoder with skip concatenation and a global
  /// input-to-output residual. Widths default to 8/16/32.
  static Architecture encoder_decoder(int w1 = 8, int w2 = 16, int w3 = 32);
  /// input -> conv(1->1, k) -> + input. Used as a minimal test network.
  static Architecture single_conv(int kernel = 3);

  /// Throws std::invalid_argument on an inconsistent graph.
  void validate() const;
  /// Channel count produced by every node.
  std::vector<int> node_channels() const;
  /// Product of conv strides along the deepest path; input dims must be a
  /// multiple of this.
  int required_divisor() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ConvBlock {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;
  std::vector<double> weight;  // (out_ch, in_ch, k, k, k)
  std::vector<double> bias;    // out_ch

  std::size_t fan_in() const { return static_cast<std::size_t>(in_ch) * kernel * kernel * kernel; }

  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

/// All trainable parameters, one ConvBlock per conv node in graph order.
struct NetParams {
  Architecture arch;
  std::vector<ConvBlock> blocks;

  std::size_t parameter_count() const;
  /// Flat views over every weight and bias array, in a fixed order.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  /// Same shapes, all zero.
  NetParams zeros_like() const;
  bool all_finite() const;

  friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// Fan-in scaled uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)), so
/// Var = 2/fan_in; zero biases. final_gain scales the last conv's weights.
NetParams init_params(const Architecture& arch, std::uint64_t seed, double final_gain = 1.0);

/// Activations of one channel-major 3D tensor.
struct Tensor {
  int channels = 0;
  Dims3 dims{};
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, Dims3 d) : channels(c), dims(d), data(static_cast<std::size_t>(c) * d.count(), 0.0) {}
  std::size_t channel_size() const { return dims.count(); }
  double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * channel_size(); }
  const double* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * channel_size(); }
};

/// Forward activations kept for the backward pass.
struct ForwardTape {
  std::vector<Tensor> acts;
};

Volume3D net_forward(const NetParams& params, const Volume3D& input);
Volume3D net_forward(const NetParams& params, const Volume3D& input, ForwardTape& tape);

/// Backpropagates dLoss/dOutput through the recorded tape, accumulating
/// parameter gradients into `grads` (same shapes as params).
void net_backprop(const NetParams& params, const ForwardTape& tape, std::span<const double> grad_output,
                  NetParams& grads);

// Layer primitives, exposed for gradient tests.
void conv3d_forward(const Tensor& in, const ConvBlock& blk, int stride, bool relu, Tensor& out);
/// grad_out is dL/d(conv output) after the ReLU mask has been applied.
void conv3d_backward(const Tensor& in, const ConvBlock& blk, int stride, const Tensor& grad_out, ConvBlock& grad_blk,
                     Tensor* grad_in);
void upsample2_forward(const Tensor& in, Tensor& out);
void upsample2_backward(const Tensor& grad_out, Tensor& grad_in);

}  // namespace sparsespect::nn
