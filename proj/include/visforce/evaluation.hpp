#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/checkpoint.hpp"
#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/metrics.hpp"
#include "visforce/model.hpp"
#include "visforce/training.hpp"
#include "visforce/windows.hpp"

namespace visforce {

/// Rebuilds the model described by a checkpoint's metadata and loads its parameters.
inline std::unique_ptr<ForceModel> load_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<ForceModel>(checkpoint_model_config(ckpt));
  restore(ckpt, model->params());
  return model;
}

inline std::unique_ptr<ForceModel> load_model(const std::filesystem::path& path) {
  return load_model(load_checkpoint(path));
}

/// Backbone feature maps of every frame, one small tape per frame.
inline std::vector<Tensor> feature_maps(const ForceModel& model, const RecordingSet& set) {
  if (set.frames.size() != set.size()) throw ContractViolation("set " + set.id + " has no loaded frames");
  std::vector<Tensor> maps;
  maps.reserve(set.frames.size());
  for (const Tensor& frame : set.frames) {
    Tape tape;
    maps.push_back(model.features(tape, frame).value());
  }
  return maps;
}

/// Per-frame descriptors fed to the recurrent stage (length feature_size() each).
inline std::vector<Tensor> encode_frames(const ForceModel& model, const RecordingSet& set) {
  const std::vector<Tensor> maps = feature_maps(model, set);
  const std::size_t k = model.attention_frames();
  std::vector<Tensor> out;
  out.reserve(maps.size());
  for (std::size_t f = 0; f < maps.size(); ++f) {
    Tape tape;
    std::vector<Var> stack;
    for (std::size_t j = 0; j < k; ++j) stack.push_back(tape.constant(maps[window_frame(f, k, j)]));
    out.push_back(model.encode(tape, stack).value());
  }
  return out;
}

/// Normalized prediction for the window ending at every frame of the set (stride 1).
inline std::vector<double> predict_set(const ForceModel& model, const RecordingSet& set, std::size_t window,
                                       std::size_t chunk = 256) {
  const std::vector<Tensor> encodes = encode_frames(model, set);
  std::vector<double> pred;
  pred.reserve(encodes.size());
  std::vector<WindowRef> windows;
  for (std::size_t begin = 0; begin < encodes.size(); begin += chunk) {
    const std::size_t end = std::min(encodes.size(), begin + chunk);
    windows.clear();
    for (std::size_t f = begin; f < end; ++f) windows.push_back({0, f});
    Tape tape;
    std::map<std::size_t, Var> constants;
    auto descriptor = [&](std::size_t, std::size_t frame) {
      auto it = constants.find(frame);
      if (it == constants.end()) it = constants.emplace(frame, tape.constant(encodes[frame])).first;
      return it->second;
    };
    const Tensor out = forward_windows(tape, model, windows, window, descriptor).value();
    for (std::size_t i = 0; i < out.size(); ++i) pred.push_back(out[i]);
  }
  return pred;
}

struct ForceTrace {
  std::string set_id;
  std::vector<double> ground_truth_newtons;
  std::vector<double> predicted_newtons;
};

/// Sliding-window trace of one model, or the mean of several (late fusion).
inline ForceTrace predict_trace(std::span<const ForceModel* const> models, const RecordingSet& set,
                                std::size_t window) {
  if (models.empty()) throw ContractViolation("predict_trace: no model given");
  std::vector<double> sum(set.size(), 0.0);
  for (const ForceModel* model : models) {
    const auto pred = predict_set(*model, set, window);
    for (std::size_t i = 0; i < pred.size(); ++i) sum[i] += pred[i];
  }
  ForceTrace trace;
  trace.set_id = set.id;
  trace.ground_truth_newtons = set.forces;
  trace.predicted_newtons.reserve(sum.size());
  for (double s : sum) trace.predicted_newtons.push_back(s / static_cast<double>(models.size()) * kMaxForceNewtons);
  return trace;
}

inline ForceTrace predict_trace(const ForceModel& model, const RecordingSet& set, std::size_t window) {
  const ForceModel* one[] = {&model};
  return predict_trace(one, set, window);
}

/// CSV with columns frame,gt_newtons,pred_newtons.
inline std::string trace_csv(const ForceTrace& trace) {
  std::string out = "frame,gt_newtons,pred_newtons\n";
  char line[96];
  for (std::size_t i = 0; i < trace.predicted_newtons.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", i, trace.ground_truth_newtons[i], trace.predicted_newtons[i]);
    out += line;
  }
  return out;
}

struct Evaluation {
  MetricsReport report;
  std::vector<ForceTrace> traces;
};

/// Metrics over every frame of every set. Errors are reported in normalized units and in
/// newtons; per-object MAE is normalized, per-bin MAE is in newtons.
inline Evaluation evaluate(std::span<const ForceModel* const> models, const std::vector<RecordingSet>& sets,
                           std::size_t window, std::optional<double> baseline_mae = std::nullopt) {
  if (sets.empty()) throw ContractViolation("evaluate: no sets");
  Evaluation ev;
  std::vector<double> pred, gt;
  std::map<std::string, std::pair<double, std::size_t>> per_object;
  for (const RecordingSet& set : sets) {
    ForceTrace trace = predict_trace(models, set, window);
    auto& [sum, count] = per_object[to_string(set.object)];
    for (std::size_t i = 0; i < trace.predicted_newtons.size(); ++i) {
      pred.push_back(trace.predicted_newtons[i]);
      gt.push_back(trace.ground_truth_newtons[i]);
      sum += std::abs(trace.predicted_newtons[i] - trace.ground_truth_newtons[i]) / kMaxForceNewtons;
      ++count;
    }
    ev.traces.push_back(std::move(trace));
  }
  std::vector<double> pred_n(pred.size()), gt_n(gt.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred_n[i] = pred[i] / kMaxForceNewtons;
    gt_n[i] = gt[i] / kMaxForceNewtons;
  }
  MetricsReport& r = ev.report;
  r.samples = pred.size();
  r.mae = mae(pred_n, gt_n);
  r.rmse = rmse(pred_n, gt_n);
  r.mae_newtons = mae(pred, gt);
  r.rmse_newtons = rmse(pred, gt);
  r.per_bin_mae = binned_mae(pred, gt);
  for (const auto& [object, acc] : per_object) r.per_object_mae[object] = acc.first / static_cast<double>(acc.second);
  if (baseline_mae && r.mae > 0.0) r.ratio_vs_baseline = improvement_ratio(*baseline_mae, r.mae);
  return ev;
}

inline Evaluation evaluate(const ForceModel& model, const std::vector<RecordingSet>& sets, std::size_t window,
                           std::optional<double> baseline_mae = std::nullopt) {
  const ForceModel* one[] = {&model};
  return evaluate(one, sets, window, baseline_mae);
}

/// Spatial attention map (H x W) of an SSAM model for every frame of the set.
inline std::vector<Tensor> attention_maps(const ForceModel& model, const RecordingSet& set) {
  const std::vector<Tensor> maps = feature_maps(model, set);
  const std::size_t k = model.attention_frames();
  std::vector<Tensor> out;
  for (std::size_t f = 0; f < maps.size(); ++f) {
    Tape tape;
    std::vector<Var> stack;
    for (std::size_t j = 0; j < k; ++j) stack.push_back(tape.constant(maps[window_frame(f, k, j)]));
    out.push_back(model.spatial_attention_map(tape, stack).value());
  }
  return out;
}

/// Comma-separated rows of an H x W (x 1) map.
inline std::string matrix_csv(const Tensor& map) {
  if (map.rank() < 2) throw ShapeError("matrix_csv: expected a 2-D map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::string out;
  char cell[40];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::snprintf(cell, sizeof cell, "%s%.17g", x ? "," : "", map[y * w + x]);
      out += cell;
    }
    out += '\n';
  }
  return out;
}

/// Writes attn_NNNNN.csv for each frame; returns the written paths.
inline std::vector<std::filesystem::path> export_attention_maps(const ForceModel& model, const RecordingSet& set,
                                                                const std::filesystem::path& dir) {
  const auto maps = attention_maps(model, set);
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  char name[32];
  for (std::size_t f = 0; f < maps.size(); ++f) {
    std::snprintf(name, sizeof name, "attn_%05zu.csv", f);
    write_text(dir / name, matrix_csv(maps[f]));
    written.push_back(dir / name);
  }
  return written;
}

}  // namespace visforce
