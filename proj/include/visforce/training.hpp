#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "visforce/autodiff.hpp"
#include "visforce/checkpoint.hpp"
#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/model.hpp"
#include "visforce/ops.hpp"
#include "visforce/rng.hpp"
#include "visforce/windows.hpp"

namespace visforce {

struct TrainConfig {
  ModelConfig model = ModelConfig::standard();
  std::size_t epochs = 120;
  std::size_t batch_size = 64;
  std::size_t window = 20;
  double base_lr = 1e-4;
  double lr_decay = 0.1;
  std::size_t decay_every = 30;  // epochs
  std::uint64_t seed = 1;
  std::size_t steps_per_epoch = 0;  // 0: total training frames / batch_size, at least 1

  void validate() const {
    model.validate();
    if (batch_size == 0 || window == 0 || decay_every == 0) throw ConfigError("training counts must be positive");
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
    if (!(lr_decay > 0.0) || !std::isfinite(lr_decay)) throw ConfigError("lr_decay must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"window", c.window},
                     {"base_lr", c.base_lr},
                     {"lr_decay", c.lr_decay},
                     {"decay_every", c.decay_every},
                     {"seed", c.seed},
                     {"steps_per_epoch", c.steps_per_epoch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("window")) j.at("window").get_to(c.window);
  if (j.contains("base_lr")) j.at("base_lr").get_to(c.base_lr);
  if (j.contains("lr_decay")) j.at("lr_decay").get_to(c.lr_decay);
  if (j.contains("decay_every")) j.at("decay_every").get_to(c.decay_every);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("steps_per_epoch")) j.at("steps_per_epoch").get_to(c.steps_per_epoch);
}

/// Step-decay schedule: base_lr * lr_decay^floor(epoch / decay_every).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw ContractViolation("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) +
                            ")");
  }
  return cfg.base_lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update from the accumulated Parameter::grad values. All gradients are
/// checked before anything is modified; a non-finite entry throws NumericalError naming it.
inline void adam_step(ParameterSet& params, AdamState& state, double lr) {
  for (const auto& [id, p] : params) {
    if (p.grad.shape() != p.value.shape()) throw ShapeError("adam: gradient shape mismatch for " + id);
    for (std::size_t i = 0; i < p.grad.size(); ++i) {
      if (!std::isfinite(p.grad[i])) {
        throw NumericalError("non-finite gradient in parameter '" + id + "' at index " + std::to_string(i));
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [id, p] : params) {
    Tensor& m = state.m.try_emplace(id, Tensor(p.value.shape())).first->second;
    Tensor& v = state.v.try_emplace(id, Tensor(p.value.shape())).first->second;
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
      throw ShapeError("adam: moment shape mismatch for " + id);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Each sample picks a set uniformly, then a window end uniformly within it (with replacement).
inline std::vector<WindowRef> sample_minibatch(const std::vector<RecordingSet>& sets, std::size_t batch_size,
                                               Rng& rng) {
  if (sets.empty()) throw ContractViolation("sample_minibatch: empty dataset");
  for (const RecordingSet& s : sets) {
    if (s.size() == 0) throw ContractViolation("sample_minibatch: set " + s.id + " has no frames");
  }
  std::vector<WindowRef> batch(batch_size);
  for (WindowRef& w : batch) {
    w.set = rng.index(sets.size());
    w.end = rng.index(sets[w.set].size());
  }
  return batch;
}

/// Normalized targets (force at each window's last frame / 12 N) as a B x 1 tensor.
inline Tensor window_targets(const std::vector<RecordingSet>& sets, std::span<const WindowRef> windows) {
  Tensor out({windows.size(), 1});
  for (std::size_t b = 0; b < windows.size(); ++b) out[b] = sets[windows[b].set].forces[windows[b].end] / kMaxForceNewtons;
  return out;
}

/// Builds the loss of one minibatch on `tape`; returns the scalar MSE.
inline Var batch_loss(Tape& tape, const ForceModel& model, const std::vector<RecordingSet>& sets,
                      std::span<const WindowRef> windows, std::size_t window) {
  EncodeCache cache(tape, model, sets);
  Var pred = forward_windows(tape, model, cache, windows, window);
  return mse_loss(pred, tape.constant(window_targets(sets, windows)));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step index
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // final parameters, or the last finite ones when aborted
  std::vector<LossRecord> log;
  bool aborted = false;
  std::string abort_reason;
};

using StepCallback = std::function<void(const LossRecord&)>;

inline std::size_t steps_per_epoch(const TrainConfig& cfg, const std::vector<RecordingSet>& sets) {
  if (cfg.steps_per_epoch > 0) return cfg.steps_per_epoch;
  std::size_t frames = 0;
  for (const RecordingSet& s : sets) frames += s.size();
  return std::max<std::size_t>(1, frames / cfg.batch_size);
}

inline std::string checkpoint_metadata(const TrainConfig& cfg, std::size_t epochs_done) {
  nlohmann::json j{{"train", cfg}, {"epochs_completed", epochs_done}};
  return j.dump();
}

/// Trains `model` in place (its parameters must already be initialized). Everything runs
/// serially in a fixed order, so identical inputs give bitwise-identical results.
inline TrainResult train(ForceModel& model, const TrainConfig& cfg, const std::vector<RecordingSet>& sets,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  if (sets.empty()) throw ContractViolation("train: empty dataset");
  Rng rng(cfg.seed ^ 0xD1B54A32D192ED03ull);
  AdamState adam;
  TrainResult result;
  const std::size_t steps = steps_per_epoch(cfg, sets);
  std::size_t global_step = 0;
  std::size_t epochs_done = 0;
  ParameterSet& params = model.params();

  for (std::size_t epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      const auto windows = sample_minibatch(sets, cfg.batch_size, rng);
      params.zero_grad();
      Tape tape;
      Var loss = batch_loss(tape, model, sets, windows, cfg.window);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(global_step);
        break;
      }
      tape.backward(loss);
      try {
        adam_step(params, adam, lr);
      } catch (const NumericalError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        break;
      }
      result.log.push_back({epoch, global_step, lr, value});
      if (on_step) on_step(result.log.back());
    }
    if (!result.aborted) ++epochs_done;
  }
  params.zero_grad();
  result.checkpoint = snapshot(params, checkpoint_metadata(cfg, epochs_done));
  return result;
}

/// Builds and initializes a model from cfg.model and cfg.seed, then trains it.
inline TrainResult train(const TrainConfig& cfg, const std::vector<RecordingSet>& sets,
                         const StepCallback& on_step = {}) {
  ForceModel model(cfg.model);
  initialize(model.params(), cfg.seed);
  return train(model, cfg, sets, on_step);
}

/// CSV with header epoch,step,lr,loss; reals printed with 17 significant digits.
inline std::string loss_log_csv(const std::vector<LossRecord>& log) {
  std::string out = "epoch,step,lr,loss\n";
  char line[128];
  for (const LossRecord& r : log) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g\n", r.epoch, r.step, r.lr, r.loss);
    out += line;
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

/// Model configuration stored in a checkpoint written by train().
inline ModelConfig checkpoint_model_config(const Checkpoint& ckpt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::exception&) {
    throw IoError("checkpoint metadata is not valid JSON");
  }
  if (!j.contains("train") || !j["train"].contains("model")) throw IoError("checkpoint metadata lacks a model config");
  ModelConfig cfg;
  from_json(j["train"]["model"], cfg);
  return cfg;
}

}  // namespace visforce
