#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "visforce/attention.hpp"
#include "visforce/autodiff.hpp"
#include "visforce/backbone.hpp"
#include "visforce/error.hpp"
#include "visforce/ops.hpp"
#include "visforce/rng.hpp"
#include "visforce/temporal.hpp"

namespace visforce {

enum class Variant { baseline, ssam, scam, se, cbam };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::ssam: return "ssam";
    case Variant::scam: return "scam";
    case Variant::se: return "se";
    case Variant::cbam: return "cbam";
  }
  return "baseline";
}

inline Variant parse_variant(const std::string& name) {
  if (name == "baseline") return Variant::baseline;
  if (name == "ssam") return Variant::ssam;
  if (name == "scam") return Variant::scam;
  if (name == "se") return Variant::se;
  if (name == "cbam") return Variant::cbam;
  throw ConfigError("unknown model variant '" + name + "' (expected baseline|ssam|scam|se|cbam)");
}

struct ModelConfig {
  Variant variant = Variant::baseline;
  BackboneConfig backbone;
  std::size_t frames = 2;  // feature maps stacked by the sequential attention blocks (current + previous)
  std::size_t reduction = 16;
  std::size_t lstm_hidden = 256;
  std::size_t fc_units = 1024;
  std::size_t cbam_kernel = 7;

  /// Full-size network for 128 x 128 frames.
  static ModelConfig standard(Variant variant = Variant::baseline) {
    ModelConfig cfg;
    cfg.variant = variant;
    return cfg;
  }

  /// Narrow network on 64 x 64 frames for single-core training runs and tests.
  static ModelConfig desk(Variant variant = Variant::baseline) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.backbone.input_size = 64;
    cfg.backbone.channels = {4, 4, 8, 8, 8, 8, 16, 16, 16, 16};
    cfg.reduction = 4;
    cfg.lstm_hidden = 16;
    cfg.fc_units = 32;
    cfg.cbam_kernel = 3;
    return cfg;
  }

  std::size_t attention_frames() const {
    return variant == Variant::ssam || variant == Variant::scam ? frames : 1;
  }

  void validate() const {
    backbone.validate();
    if (frames == 0) throw ConfigError("attention frame count must be at least 1");
    if (lstm_hidden == 0 || fc_units == 0) throw ConfigError("hidden sizes must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)},
                     {"input_size", c.backbone.input_size},
                     {"channels", c.backbone.channels},
                     {"frames", c.frames},
                     {"reduction", c.reduction},
                     {"lstm_hidden", c.lstm_hidden},
                     {"fc_units", c.fc_units},
                     {"cbam_kernel", c.cbam_kernel}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("input_size")) c.backbone.input_size = j.at("input_size").get<std::size_t>();
  if (j.contains("channels")) {
    const auto ch = j.at("channels").get<std::vector<std::size_t>>();
    if (ch.size() != c.backbone.channels.size()) throw ConfigError("model.channels must list 10 layer widths");
    std::copy(ch.begin(), ch.end(), c.backbone.channels.begin());
  }
  if (j.contains("frames")) c.frames = j.at("frames").get<std::size_t>();
  if (j.contains("reduction")) c.reduction = j.at("reduction").get<std::size_t>();
  if (j.contains("lstm_hidden")) c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
  if (j.contains("fc_units")) c.fc_units = j.at("fc_units").get<std::size_t>();
  if (j.contains("cbam_kernel")) c.cbam_kernel = j.at("cbam_kernel").get<std::size_t>();
}

/// Index of the t-th frame (0-based) of a window ending at `end`. Positions before the start of
/// the recording repeat frame 0.
inline std::size_t window_frame(std::size_t end, std::size_t window, std::size_t t) {
  const std::size_t offset = window - 1 - t;
  return end >= offset ? end - offset : 0;
}

/// Per-frame CNN encoder with optional attention, a BLSTM over the window and a regression head.
class ForceModel {
 public:
  explicit ForceModel(const ModelConfig& cfg)
      : cfg_(validated(cfg)), backbone_(params_, cfg_.backbone, "backbone/"),
        attention_(make_attention(params_, cfg_)),
        blstm_(params_, "temporal/blstm/", cfg_.backbone.output_channels(), cfg_.lstm_hidden),
        head_(params_, "temporal/head/", 2 * cfg_.lstm_hidden, cfg_.fc_units) {}

  ForceModel(const ForceModel&) = delete;
  ForceModel& operator=(const ForceModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const Backbone& backbone() const { return backbone_; }
  const Blstm& blstm() const { return blstm_; }
  const RegressionHead& head() const { return head_; }
  const AttentionBlock* attention() const { return attention_.get(); }

  std::size_t attention_frames() const { return attention_ ? attention_->frames() : 1; }
  std::size_t feature_size() const { return cfg_.backbone.output_channels(); }

  /// Backbone feature map X_t of one preprocessed frame.
  Var features(Tape& tape, const Tensor& frame) const { return backbone_.extract_features(tape, tape.constant(frame)); }

  /// Attention-refined current map; `maps` holds attention_frames() maps, current last.
  Var refine(Tape& tape, std::span<const Var> maps) const {
    if (!attention_) {
      if (maps.empty()) throw ContractViolation("refine: no feature map given");
      return maps.back();
    }
    return attention_->refine(tape, maps);
  }

  /// Frame descriptor fed to the recurrent stage: GAP of the refined map.
  Var encode(Tape& tape, std::span<const Var> maps) const { return global_average_pool(refine(tape, maps)); }

  /// `steps` holds one B x feature_size() matrix per time step; returns B x 1 predictions.
  Var regress(Tape& tape, std::span<const Var> steps) const { return head_.forward(tape, blstm_.forward(tape, steps)); }

  /// Spatial attention map of an SSAM model (H x W x 1).
  Var spatial_attention_map(Tape& tape, std::span<const Var> maps) const {
    const auto* ssam = dynamic_cast<const SpatialAttention*>(attention_.get());
    if (ssam == nullptr) throw ContractViolation("attention maps are only defined for the ssam variant");
    return ssam->attention_map(tape, maps);
  }

 private:
  static const ModelConfig& validated(const ModelConfig& cfg) {
    cfg.validate();
    return cfg;
  }

  static std::unique_ptr<AttentionBlock> make_attention(ParameterSet& params, const ModelConfig& cfg) {
    const std::size_t c = cfg.backbone.output_channels();
    const std::size_t hw = cfg.backbone.output_size();
    switch (cfg.variant) {
      case Variant::baseline: return nullptr;
      case Variant::ssam: return std::make_unique<SpatialAttention>(params, "attention/ssam/", cfg.frames, c);
      case Variant::scam:
        return std::make_unique<ChannelAttention>(params, "attention/scam/", cfg.frames, c, hw, hw, cfg.reduction);
      case Variant::se: return std::make_unique<SqueezeExcitation>(params, "attention/se/", c, cfg.reduction);
      case Variant::cbam: return std::make_unique<Cbam>(params, "attention/cbam/", c, cfg.reduction, cfg.cbam_kernel);
    }
    return nullptr;
  }

  ModelConfig cfg_;
  ParameterSet params_;
  Backbone backbone_;
  std::unique_ptr<AttentionBlock> attention_;
  Blstm blstm_;
  RegressionHead head_;
};

/// Draws every parameter according to its Init tag, in id order, from one seeded stream.
inline void initialize(ParameterSet& params, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [id, p] : params) {
    switch (p.init) {
      case Init::zero:
        p.value.fill(0.0);
        break;
      case Init::fan_in: {
        const double limit = std::sqrt(6.0 / static_cast<double>(p.fan_in));
        for (double& v : p.value.data()) v = rng.uniform(-limit, limit);
        break;
      }
      case Init::recurrent: {
        const double limit = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
        for (double& v : p.value.data()) v = rng.uniform(-limit, limit);
        break;
      }
    }
    p.zero_grad();
  }
}

}  // namespace visforce
