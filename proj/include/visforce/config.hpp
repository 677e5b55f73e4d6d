#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/synth.hpp"
#include "visforce/training.hpp"

namespace visforce {

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"seed", c.seed},           {"n_sets", c.n_sets},     {"frames_per_set", c.frames_per_set},
                     {"image_size", c.image_size}, {"pulses", c.pulses},     {"peak_min", c.peak_min},
                     {"peak_max", c.peak_max},     {"gain", c.gain},         {"noise", c.noise}};
  j["object"] = c.object ? nlohmann::json(to_string(*c.object)) : nlohmann::json();
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("n_sets")) j.at("n_sets").get_to(c.n_sets);
  if (j.contains("frames_per_set")) j.at("frames_per_set").get_to(c.frames_per_set);
  if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
  if (j.contains("pulses")) j.at("pulses").get_to(c.pulses);
  if (j.contains("peak_min")) j.at("peak_min").get_to(c.peak_min);
  if (j.contains("peak_max")) j.at("peak_max").get_to(c.peak_max);
  if (j.contains("gain")) j.at("gain").get_to(c.gain);
  if (j.contains("noise")) j.at("noise").get_to(c.noise);
  if (j.contains("object")) {
    const auto& o = j.at("object");
    if (o.is_null()) {
      c.object.reset();
    } else {
      c.object = parse_object(o.get<std::string>());
    }
  }
}

/// Contents of the shared configuration file read by every CLI verb:
///   {"train": {...TrainConfig...}, "synth": {...SynthConfig...}, "data": {"manifest": ..., "split_seed": ...}}
/// Missing keys keep their defaults.
struct AppConfig {
  TrainConfig train;
  SynthConfig synth;
  std::string manifest;
  std::uint64_t split_seed = 0;
};

inline void to_json(nlohmann::json& j, const AppConfig& c) {
  j = nlohmann::json{{"train", c.train},
                     {"synth", c.synth},
                     {"data", {{"manifest", c.manifest}, {"split_seed", c.split_seed}}}};
}

inline void from_json(const nlohmann::json& j, AppConfig& c) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "train" && key != "synth" && key != "data") throw ConfigError("unknown config section '" + key + "'");
  }
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("synth")) from_json(j.at("synth"), c.synth);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("manifest")) d.at("manifest").get_to(c.manifest);
    if (d.contains("split_seed")) d.at("split_seed").get_to(c.split_seed);
  }
}

inline AppConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  AppConfig cfg;
  try {
    from_json(nlohmann::json::parse(in, nullptr, true, true), cfg);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid config " + path.string() + ": " + e.what());
  }
  return cfg;
}

}  // namespace visforce
