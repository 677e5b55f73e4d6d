#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"
#include "visforce/ops.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

// ---------------------------------------------------------------------------
// Weighted average pooling
// ---------------------------------------------------------------------------

/// Weighted sum over the channels of an H x W x kC stack at every position,
/// implemented as a 1x1 convolution with a single output channel. Returns H x W x 1.
inline Var wap_over_channels(Var stack, Var weights) {
  const Shape& s = stack.shape();
  if (s.size() != 3) throw ShapeError("wap_over_channels: stack must be H x W x kC, got " + shape_str(s));
  if (weights.value().size() != s[2]) {
    throw ShapeError("wap_over_channels: " + std::to_string(weights.value().size()) + " weights for " +
                     std::to_string(s[2]) + " channels");
  }
  return conv2d(stack, reshape(weights, {1, 1, s[2], 1}), 1, Padding::valid);
}

/// Weighted sum over the H*W positions of each channel (weights indexed i * W + j). Returns kC.
inline Var wap_over_positions(Var stack, Var weights) {
  const Shape& s = stack.shape();
  if (s.size() != 3) throw ShapeError("wap_over_positions: stack must be H x W x kC, got " + shape_str(s));
  const std::size_t positions = s[0] * s[1];
  if (weights.value().size() != positions) {
    throw ShapeError("wap_over_positions: " + std::to_string(weights.value().size()) + " weights for " +
                     std::to_string(positions) + " positions");
  }
  Var pooled = matmul(reshape(weights, {1, positions}), reshape(stack, {positions, s[2]}));
  return reshape(pooled, {s[2]});
}

inline Tensor wap_over_channels(const Tensor& stack, const Tensor& weights) {
  Tape tape;
  Tensor out = wap_over_channels(tape.constant(stack), tape.constant(weights)).value();
  return std::move(out).reshaped({stack.dim(0), stack.dim(1)});
}

inline Tensor wap_over_positions(const Tensor& stack, const Tensor& weights) {
  Tape tape;
  return wap_over_positions(tape.constant(stack), tape.constant(weights)).value();
}

/// Channel-wise concatenation of k feature maps, oldest first; the current frame occupies the last C channels.
inline Var stack_frames(std::span<const Var> maps) {
  if (maps.empty()) throw ContractViolation("stack_frames: at least one feature map required");
  for (const Var& m : maps) {
    if (m.shape() != maps[0].shape() || m.shape().size() != 3) {
      throw ShapeError("stack_frames: feature maps must share one H x W x C shape");
    }
  }
  if (maps.size() == 1) return maps[0];
  return concat_last(maps);
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Refines the current frame's H x W x C map given itself and k-1 preceding maps.
class AttentionBlock {
 public:
  virtual ~AttentionBlock() = default;

  /// Number of feature maps consumed per call (current frame last).
  virtual std::size_t frames() const = 0;
  virtual Var refine(Tape& tape, std::span<const Var> maps) const = 0;

 protected:
  void check_frames(std::span<const Var> maps) const {
    if (maps.size() != frames()) {
      throw ContractViolation("attention block expects " + std::to_string(frames()) + " feature maps, got " +
                              std::to_string(maps.size()));
    }
  }
};

/// Sequential spatial attention: M_s = sigmoid(WAP_channels(stack) + b), X' = M_s * X_t + X_t.
class SpatialAttention final : public AttentionBlock {
 public:
  SpatialAttention(ParameterSet& params, const std::string& prefix, std::size_t frames, std::size_t channels)
      : frames_(frames),
        channels_(channels),
        weights_(params.add(prefix + "w_s", Tensor({frames * channels}), Init::fan_in, frames * channels)),
        bias_(params.add(prefix + "b", Tensor({1}))) {
    if (frames == 0) throw ConfigError("spatial attention needs at least one frame");
  }

  std::size_t frames() const override { return frames_; }

  /// H x W x 1 gate with entries in (0, 1).
  Var attention_map(Tape& tape, std::span<const Var> maps) const {
    check_frames(maps);
    Var stack = stack_frames(maps);
    if (stack.shape()[2] != frames_ * channels_) {
      throw ShapeError("spatial attention configured for " + std::to_string(frames_ * channels_) +
                       " stacked channels, got " + shape_str(stack.shape()));
    }
    Var projected = wap_over_channels(stack, tape.parameter(weights_));
    return sigmoid(add_bias(projected, tape.parameter(bias_)));
  }

  Var refine(Tape& tape, std::span<const Var> maps) const override {
    Var gate = attention_map(tape, maps);
    const Var current = maps.back();
    return add(mul(gate, current), current);
  }

 private:
  std::size_t frames_;
  std::size_t channels_;
  Parameter& weights_;
  Parameter& bias_;
};

/// Sequential channel attention: Y_c = WAP_positions(stack), M_c = sigmoid(F1(relu(F0(Y_c)))),
/// the last C entries of M_c gate the current frame: X' = M_c[last C] * X_t + X_t.
class ChannelAttention final : public AttentionBlock {
 public:
  ChannelAttention(ParameterSet& params, const std::string& prefix, std::size_t frames, std::size_t channels,
                   std::size_t height, std::size_t width, std::size_t reduction)
      : frames_(frames), channels_(channels), hidden_(checked_hidden(frames * channels, reduction)),
        position_weights_(params.add(prefix + "w_c", Tensor({height * width}), Init::fan_in, height * width)),
        squeeze_w_(params.add(prefix + "f0/w", Tensor({hidden_, frames * channels}), Init::fan_in, frames * channels)),
        squeeze_b_(params.add(prefix + "f0/b", Tensor({hidden_}))),
        expand_w_(params.add(prefix + "f1/w", Tensor({frames * channels, hidden_}), Init::fan_in, hidden_)),
        expand_b_(params.add(prefix + "f1/b", Tensor({frames * channels}))) {}

  std::size_t frames() const override { return frames_; }

  /// Full kC gate (one entry per stacked channel) with entries in (0, 1).
  Var attention_map(Tape& tape, std::span<const Var> maps) const {
    check_frames(maps);
    Var stack = stack_frames(maps);
    const std::size_t kc = frames_ * channels_;
    if (stack.shape()[2] != kc) {
      throw ShapeError("channel attention configured for " + std::to_string(kc) + " stacked channels, got " +
                       shape_str(stack.shape()));
    }
    Var pooled = reshape(wap_over_positions(stack, tape.parameter(position_weights_)), {1, kc});
    Var hidden = relu(linear(pooled, tape.parameter(squeeze_w_), tape.parameter(squeeze_b_)));
    Var gate = sigmoid(linear(hidden, tape.parameter(expand_w_), tape.parameter(expand_b_)));
    return reshape(gate, {kc});
  }

  Var refine(Tape& tape, std::span<const Var> maps) const override {
    Var gate = attention_map(tape, maps);
    Var current_gate = reshape(slice_last(gate, (frames_ - 1) * channels_, channels_), {1, 1, channels_});
    const Var current = maps.back();
    return add(mul(current_gate, current), current);
  }

 private:
  static std::size_t checked_hidden(std::size_t kc, std::size_t reduction) {
    if (reduction == 0 || kc % reduction != 0 || kc / reduction == 0) {
      throw ConfigError("reduction ratio " + std::to_string(reduction) + " must divide the " + std::to_string(kc) +
                        " stacked channels");
    }
    return kc / reduction;
  }

  std::size_t frames_;
  std::size_t channels_;
  std::size_t hidden_;
  Parameter& position_weights_;
  Parameter& squeeze_w_;
  Parameter& squeeze_b_;
  Parameter& expand_w_;
  Parameter& expand_b_;
};

/// Squeeze-and-excitation on a single frame: GAP, two-layer bottleneck MLP, sigmoid gate, X' = M * X.
class SqueezeExcitation final : public AttentionBlock {
 public:
  SqueezeExcitation(ParameterSet& params, const std::string& prefix, std::size_t channels, std::size_t reduction)
      : channels_(channels), hidden_(hidden_units(channels, reduction)),
        squeeze_w_(params.add(prefix + "fc0/w", Tensor({hidden_, channels}), Init::fan_in, channels)),
        squeeze_b_(params.add(prefix + "fc0/b", Tensor({hidden_}))),
        expand_w_(params.add(prefix + "fc1/w", Tensor({channels, hidden_}), Init::fan_in, hidden_)),
        expand_b_(params.add(prefix + "fc1/b", Tensor({channels}))) {}

  std::size_t frames() const override { return 1; }

  Var refine(Tape& tape, std::span<const Var> maps) const override {
    check_frames(maps);
    const Var x = maps[0];
    Var squeezed = reshape(global_average_pool(x), {1, channels_});
    Var hidden = relu(linear(squeezed, tape.parameter(squeeze_w_), tape.parameter(squeeze_b_)));
    Var gate = sigmoid(linear(hidden, tape.parameter(expand_w_), tape.parameter(expand_b_)));
    return mul(reshape(gate, {1, 1, channels_}), x);
  }

  static std::size_t hidden_units(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels % reduction != 0) {
      throw ConfigError("reduction ratio " + std::to_string(reduction) + " must divide " + std::to_string(channels) +
                        " channels");
    }
    return channels / reduction;
  }

 private:
  std::size_t channels_;
  std::size_t hidden_;
  Parameter& squeeze_w_;
  Parameter& squeeze_b_;
  Parameter& expand_w_;
  Parameter& expand_b_;
};

/// CBAM on a single frame: channel gate from a shared MLP over avg- and max-pooled
/// descriptors, then a spatial gate from a convolution over channel-wise mean and max maps.
class Cbam final : public AttentionBlock {
 public:
  Cbam(ParameterSet& params, const std::string& prefix, std::size_t channels, std::size_t reduction,
       std::size_t kernel_size = 7)
      : channels_(channels), hidden_(SqueezeExcitation::hidden_units(channels, reduction)),
        mlp0_w_(params.add(prefix + "mlp0/w", Tensor({hidden_, channels}), Init::fan_in, channels)),
        mlp0_b_(params.add(prefix + "mlp0/b", Tensor({hidden_}))),
        mlp1_w_(params.add(prefix + "mlp1/w", Tensor({channels, hidden_}), Init::fan_in, hidden_)),
        mlp1_b_(params.add(prefix + "mlp1/b", Tensor({channels}))),
        spatial_w_(params.add(prefix + "spatial/w", Tensor({kernel_size, kernel_size, 2, 1}), Init::fan_in,
                              kernel_size * kernel_size * 2)),
        spatial_b_(params.add(prefix + "spatial/b", Tensor({1}))) {
    if (kernel_size % 2 == 0) throw ConfigError("CBAM spatial kernel size must be odd");
  }

  std::size_t frames() const override { return 1; }

  Var channel_gate(Tape& tape, Var x) const {
    auto mlp = [&](Var v) {
      Var h = relu(linear(reshape(v, {1, channels_}), tape.parameter(mlp0_w_), tape.parameter(mlp0_b_)));
      return linear(h, tape.parameter(mlp1_w_), tape.parameter(mlp1_b_));
    };
    Var logits = add(mlp(global_average_pool(x)), mlp(global_max_pool(x)));
    return reshape(sigmoid(logits), {1, 1, channels_});
  }

  Var spatial_gate(Tape& tape, Var x) const {
    Var descriptors = concat_last({channel_mean(x), channel_max(x)});
    Var logits = add_bias(conv2d(descriptors, tape.parameter(spatial_w_), 1, Padding::same), tape.parameter(spatial_b_));
    return sigmoid(logits);
  }

  Var refine(Tape& tape, std::span<const Var> maps) const override {
    check_frames(maps);
    Var x1 = mul(channel_gate(tape, maps[0]), maps[0]);
    return mul(spatial_gate(tape, x1), x1);
  }

 private:
  std::size_t channels_;
  std::size_t hidden_;
  Parameter& mlp0_w_;
  Parameter& mlp0_b_;
  Parameter& mlp1_w_;
  Parameter& mlp1_b_;
  Parameter& spatial_w_;
  Parameter& spatial_b_;
};

// ---------------------------------------------------------------------------
// Late fusion
// ---------------------------------------------------------------------------

/// Elementwise mean of two prediction series.
inline std::vector<double> ensemble_average(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("ensemble_average: series lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " differ");
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
  return out;
}

}  // namespace visforce
