#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/model.hpp"
#include "visforce/ops.hpp"

namespace visforce {

/// A training or evaluation window: `window` consecutive frames of one set ending at `end`.
struct WindowRef {
  std::size_t set = 0;
  std::size_t end = 0;
};

/// Builds frame encodes on a tape, computing each (set, frame) feature map and encode once.
class EncodeCache {
 public:
  EncodeCache(Tape& tape, const ForceModel& model, const std::vector<RecordingSet>& sets)
      : tape_(tape), model_(model), sets_(sets) {}

  Var feature(std::size_t set, std::size_t frame) {
    const auto key = std::make_pair(set, frame);
    if (auto it = features_.find(key); it != features_.end()) return it->second;
    const RecordingSet& s = sets_.at(set);
    if (frame >= s.frames.size()) throw ContractViolation("frame " + std::to_string(frame) + " not loaded for " + s.id);
    Var v = model_.features(tape_, s.frames[frame]);
    features_.emplace(key, v);
    return v;
  }

  /// Descriptor of `frame`; attention blocks see it together with its predecessors
  /// (clamped at the first frame of the set).
  Var encode(std::size_t set, std::size_t frame) {
    const auto key = std::make_pair(set, frame);
    if (auto it = encodes_.find(key); it != encodes_.end()) return it->second;
    const std::size_t k = model_.attention_frames();
    std::vector<Var> maps;
    maps.reserve(k);
    for (std::size_t j = 0; j < k; ++j) maps.push_back(feature(set, window_frame(frame, k, j)));
    Var v = model_.encode(tape_, maps);
    encodes_.emplace(key, v);
    return v;
  }

  std::size_t unique_frames() const { return features_.size(); }

 private:
  Tape& tape_;
  const ForceModel& model_;
  const std::vector<RecordingSet>& sets_;
  std::map<std::pair<std::size_t, std::size_t>, Var> features_;
  std::map<std::pair<std::size_t, std::size_t>, Var> encodes_;
};

/// Stacks per-step descriptors of every window (B x D per step) and runs the recurrent stage.
/// `descriptor(set, frame)` yields a length-D Var. Returns B x 1 normalized predictions.
template <class Descriptor>
Var forward_windows(Tape& tape, const ForceModel& model, std::span<const WindowRef> windows, std::size_t window,
                    Descriptor&& descriptor) {
  if (windows.empty()) throw ContractViolation("forward_windows: no windows");
  if (window == 0) throw ContractViolation("forward_windows: window must be positive");
  std::vector<Var> steps;
  steps.reserve(window);
  std::vector<Var> rows(windows.size());
  for (std::size_t t = 0; t < window; ++t) {
    for (std::size_t b = 0; b < windows.size(); ++b) {
      rows[b] = descriptor(windows[b].set, window_frame(windows[b].end, window, t));
    }
    steps.push_back(stack_rows(rows));
  }
  return model.regress(tape, steps);
}

inline Var forward_windows(Tape& tape, const ForceModel& model, EncodeCache& cache, std::span<const WindowRef> windows,
                           std::size_t window) {
  return forward_windows(tape, model, windows, window,
                         [&](std::size_t set, std::size_t frame) { return cache.encode(set, frame); });
}

}  // namespace visforce
