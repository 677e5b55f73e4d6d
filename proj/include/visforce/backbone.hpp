#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"
#include "visforce/ops.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// VGG-style extractor: five pairs of 3x3 same-padded conv + ReLU, with a 2x2 max pool
/// after each of the first four pairs. The default matches the 10-layer network
/// used for 128 x 128 grayscale frames (8 x 8 x 256 output).
struct BackboneConfig {
  std::size_t input_size = 128;
  std::array<std::size_t, 10> channels = {16, 16, 32, 32, 64, 64, 128, 128, 256, 256};

  static constexpr std::size_t kPools = 4;

  std::size_t output_size() const { return input_size >> kPools; }
  std::size_t output_channels() const { return channels.back(); }

  void validate() const {
    if (input_size == 0 || input_size % (std::size_t{1} << kPools) != 0) {
      throw ConfigError("backbone input size must be a positive multiple of 16, got " + std::to_string(input_size));
    }
    for (auto c : channels) {
      if (c == 0) throw ConfigError("backbone channel counts must be positive");
    }
  }
};

class Backbone {
 public:
  Backbone(ParameterSet& params, const BackboneConfig& cfg, const std::string& prefix = "backbone/") : cfg_(cfg) {
    cfg_.validate();
    std::size_t in_ch = 1;
    for (std::size_t layer = 0; layer < cfg_.channels.size(); ++layer) {
      const std::size_t out_ch = cfg_.channels[layer];
      const std::string name = prefix + layer_name(layer);
      weights_.push_back(&params.add(name + "/w", Tensor({3, 3, in_ch, out_ch}), Init::fan_in, 9 * in_ch));
      biases_.push_back(&params.add(name + "/b", Tensor({out_ch})));
      in_ch = out_ch;
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  /// "conv1_1" ... "conv5_2"
  static std::string layer_name(std::size_t layer) {
    return "conv" + std::to_string(layer / 2 + 1) + "_" + std::to_string(layer % 2 + 1);
  }

  /// input_size x input_size x 1 frame -> output_size x output_size x output_channels map.
  /// When `shapes` is given, the shape after every pooling stage and the final map is appended.
  Var extract_features(Tape& tape, Var frame, std::vector<Shape>* shapes = nullptr) const {
    const Shape expected{cfg_.input_size, cfg_.input_size, 1};
    if (frame.shape() != expected) {
      throw ShapeError("backbone expects a frame of shape " + shape_str(expected) + ", got " +
                       shape_str(frame.shape()));
    }
    Var x = frame;
    for (std::size_t layer = 0; layer < weights_.size(); ++layer) {
      x = relu(add_bias(conv2d(x, tape.parameter(*weights_[layer]), 1, Padding::same), tape.parameter(*biases_[layer])));
      const bool pair_done = layer % 2 == 1;
      if (pair_done && layer / 2 < BackboneConfig::kPools) {
        x = maxpool2(x);
        if (shapes != nullptr) shapes->push_back(x.shape());
      }
    }
    if (shapes != nullptr) shapes->push_back(x.shape());
    return x;
  }

 private:
  BackboneConfig cfg_;
  std::vector<Parameter*> weights_;
  std::vector<Parameter*> biases_;
};

}  // namespace visforce
