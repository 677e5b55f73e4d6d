#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/rng.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// Procedural stand-in for the pressing rig: a bright elastic disk resting on a floor, squeezed
/// by a probe bar. The disk's vertical semi-axis shrinks linearly with the applied force.
struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_sets = 10;
  std::size_t frames_per_set = 500;
  std::size_t image_size = 128;
  std::size_t pulses = 4;
  double peak_min = 2.0;  // newtons
  double peak_max = 12.0;
  double gain = 0.5;         // fractional height loss at 12 N for the softest object
  double noise = 0.0;        // std-dev of additive pixel noise, [0, 1] intensity units
  std::optional<ObjectKind> object;  // every set uses this object when given

  void validate() const {
    if (n_sets == 0 || frames_per_set == 0 || pulses == 0) throw ConfigError("synth counts must be positive");
    if (image_size < 8) throw ConfigError("synth image size must be at least 8");
    if (!(peak_min >= 0.0 && peak_min <= peak_max && peak_max <= kMaxForceNewtons)) {
      throw ConfigError("synth peaks must satisfy 0 <= peak_min <= peak_max <= 12");
    }
    if (!(gain > 0.0 && gain < 1.0)) throw ConfigError("synth gain must lie in (0, 1)");
    if (!(noise >= 0.0)) throw ConfigError("synth noise must be nonnegative");
  }
};

inline double stiffness_factor(ObjectKind object) {
  switch (object) {
    case ObjectKind::sponge: return 1.0;
    case ObjectKind::paper_cup: return 0.8;
    case ObjectKind::tube: return 0.65;
    case ObjectKind::stapler: return 0.5;
  }
  return 1.0;
}

/// Scene parameters of a single frame.
struct SynthScene {
  std::size_t size = 128;
  ObjectKind object = ObjectKind::sponge;
  int angle_deg = 0;
  int lux = 550;
  double force = 0.0;  // newtons
  double gain = 0.5;
};

/// Semi-axes (horizontal, vertical) of the disk in pixels.
inline std::pair<double, double> disk_axes(const SynthScene& s) {
  const double radius = 0.28 * static_cast<double>(s.size);
  const double squeeze = s.gain * std::clamp(s.force, 0.0, kMaxForceNewtons) / kMaxForceNewtons * stiffness_factor(s.object);
  return {radius * (1.0 + 0.5 * squeeze), radius * (1.0 - squeeze)};
}

/// Renders the scene with 4 x 4 supersampling; intensities in [0, 1], not yet quantized.
inline std::vector<double> render_scene(const SynthScene& s) {
  const double size = static_cast<double>(s.size);
  const auto [a, b] = disk_axes(s);
  const double floor_y = 0.85 * size;
  const double cx = 0.5 * size;
  const double cy = floor_y - b;
  const double top = floor_y - 2.0 * b;

  const double light = 0.6 + 0.4 * static_cast<double>(s.lux) / 750.0;
  const double theta = static_cast<double>(s.angle_deg) * std::numbers::pi / 180.0;
  const double ux = std::sin(theta), uy = -std::cos(theta);  // probe axis, pointing away from the disk
  const double half_width = 0.06 * size;

  auto shade = [&](double px, double py) {
    const double dx = (px - cx) / a, dy = (py - cy) / b;
    const double r2 = dx * dx + dy * dy;
    if (r2 <= 1.0) return light * (0.7 + 0.25 * (1.0 - r2));
    const double rx = px - cx, ry = py - top;
    const double along = rx * ux + ry * uy;
    const double across = -rx * uy + ry * ux;
    if (along >= 0.0 && std::abs(across) <= half_width) return 0.45 * light;
    return py >= floor_y ? 0.2 * light : 0.06 * light;
  };

  constexpr int kSub = 4;
  std::vector<double> img(s.size * s.size);
  for (std::size_t y = 0; y < s.size; ++y) {
    for (std::size_t x = 0; x < s.size; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          acc += shade(static_cast<double>(x) + (sx + 0.5) / kSub, static_cast<double>(y) + (sy + 0.5) / kSub);
        }
      }
      img[y * s.size + x] = acc / (kSub * kSub);
    }
  }
  return img;
}

/// Quantized size x size x 1 frame (8-bit levels / 255), with optional Gaussian pixel noise.
inline Tensor render_frame(const SynthScene& s, double noise = 0.0, Rng* rng = nullptr) {
  const std::vector<double> img = render_scene(s);
  Tensor out({s.size, s.size, 1});
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img[i];
    if (noise > 0.0 && rng != nullptr) v += noise * rng->normal();
    out[i] = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  }
  return out;
}

/// Force trace in newtons: one half-sine touch inside each of `pulses` equal segments, with
/// random peak, duration (50-85% of the segment) and onset. Zero outside the touches.
inline std::vector<double> synth_force_trace(std::size_t frames, std::size_t pulses, double peak_min, double peak_max,
                                             Rng& rng) {
  std::vector<double> force(frames, 0.0);
  const double segment = static_cast<double>(frames) / static_cast<double>(pulses);
  for (std::size_t p = 0; p < pulses; ++p) {
    const double peak = rng.uniform(peak_min, peak_max);
    const double duration = segment * rng.uniform(0.5, 0.85);
    const double onset = static_cast<double>(p) * segment + rng.uniform(0.0, segment - duration);
    for (std::size_t t = 0; t < frames; ++t) {
      const double phase = (static_cast<double>(t) - onset) / duration;
      if (phase > 0.0 && phase < 1.0) force[t] = std::max(0.0, peak * std::sin(std::numbers::pi * phase));
    }
  }
  return force;
}

/// Deterministic per seed. Sets cycle through the objects (unless one is fixed) and draw their
/// pressing angle and illumination uniformly from the recorded conditions.
inline std::vector<RecordingSet> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<RecordingSet> sets;
  sets.reserve(cfg.n_sets);
  for (std::size_t i = 0; i < cfg.n_sets; ++i) {
    RecordingSet set;
    char id[32];
    std::snprintf(id, sizeof id, "set_%03zu", i);
    set.id = id;
    set.object = cfg.object ? *cfg.object : kObjects[i % std::size(kObjects)];
    set.angle_deg = kAngles[rng.index(std::size(kAngles))];
    set.lux = kLuxLevels[rng.index(std::size(kLuxLevels))];
    set.forces = synth_force_trace(cfg.frames_per_set, cfg.pulses, cfg.peak_min, cfg.peak_max, rng);
    set.frames.reserve(cfg.frames_per_set);
    for (double f : set.forces) {
      const SynthScene scene{cfg.image_size, set.object, set.angle_deg, set.lux, f, cfg.gain};
      set.frames.push_back(render_frame(scene, cfg.noise, &rng));
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

}  // namespace visforce
