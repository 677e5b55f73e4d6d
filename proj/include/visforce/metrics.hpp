#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "visforce/error.hpp"

namespace visforce {

namespace detail {

inline void require_pairs(std::span<const double> pred, std::span<const double> gt, const char* what) {
  if (pred.empty()) throw ContractViolation(std::string(what) + ": empty input");
  if (pred.size() != gt.size()) {
    throw ContractViolation(std::string(what) + ": " + std::to_string(pred.size()) + " predictions vs " +
                            std::to_string(gt.size()) + " targets");
  }
}

}  // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> gt) {
  detail::require_pairs(pred, gt, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - gt[i]);
  return acc / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> gt) {
  detail::require_pairs(pred, gt, "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

/// Baseline MAE over model MAE, as a whole percentage.
inline int improvement_ratio(double baseline_mae, double model_mae) {
  if (!(baseline_mae > 0.0) || !(model_mae > 0.0)) {
    throw ContractViolation("improvement_ratio: both errors must be positive");
  }
  return static_cast<int>(std::lround(100.0 * baseline_mae / model_mae));
}

struct ForceBin {
  std::size_t index = 0;  // covers [index, index + 1) newtons; the last bin is open-ended
  std::size_t count = 0;
  double mae = 0.0;
};

/// Absolute error grouped by ground-truth force in newtons: bin floor(gt) clamped to
/// [0, n_bins - 1]. Bins without samples are left out.
inline std::vector<ForceBin> binned_mae(std::span<const double> pred_newtons, std::span<const double> gt_newtons,
                                        double bin_width = 1.0, std::size_t n_bins = 11) {
  if (pred_newtons.size() != gt_newtons.size()) throw ContractViolation("binned_mae: length mismatch");
  if (!(bin_width > 0.0) || n_bins == 0) throw ContractViolation("binned_mae: invalid bin layout");
  std::vector<double> sums(n_bins, 0.0);
  std::vector<std::size_t> counts(n_bins, 0);
  for (std::size_t i = 0; i < gt_newtons.size(); ++i) {
    const double pos = std::floor(gt_newtons[i] / bin_width);
    const auto bin = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(n_bins - 1)));
    sums[bin] += std::abs(pred_newtons[i] - gt_newtons[i]);
    ++counts[bin];
  }
  std::vector<ForceBin> bins;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (counts[b] > 0) bins.push_back({b, counts[b], sums[b] / static_cast<double>(counts[b])});
  }
  return bins;
}

struct MetricsReport {
  double rmse = 0.0;  // normalized units (force / 12 N)
  double mae = 0.0;
  double rmse_newtons = 0.0;
  double mae_newtons = 0.0;
  std::size_t samples = 0;
  std::optional<int> ratio_vs_baseline;
  std::vector<ForceBin> per_bin_mae;               // newtons
  std::map<std::string, double> per_object_mae;    // normalized units
};

inline void to_json(nlohmann::json& j, const ForceBin& b) {
  j = nlohmann::json{{"bin", b.index}, {"count", b.count}, {"mae_newtons", b.mae}};
}

inline void from_json(const nlohmann::json& j, ForceBin& b) {
  j.at("bin").get_to(b.index);
  j.at("count").get_to(b.count);
  j.at("mae_newtons").get_to(b.mae);
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"rmse", r.rmse},
                     {"mae", r.mae},
                     {"rmse_newtons", r.rmse_newtons},
                     {"mae_newtons", r.mae_newtons},
                     {"samples", r.samples},
                     {"per_bin_mae", r.per_bin_mae},
                     {"per_object_mae", r.per_object_mae}};
  j["ratio_vs_baseline"] = r.ratio_vs_baseline ? nlohmann::json(*r.ratio_vs_baseline) : nlohmann::json();
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  j.at("rmse").get_to(r.rmse);
  j.at("mae").get_to(r.mae);
  j.at("rmse_newtons").get_to(r.rmse_newtons);
  j.at("mae_newtons").get_to(r.mae_newtons);
  j.at("samples").get_to(r.samples);
  j.at("per_bin_mae").get_to(r.per_bin_mae);
  j.at("per_object_mae").get_to(r.per_object_mae);
  r.ratio_vs_baseline.reset();
  if (j.contains("ratio_vs_baseline") && !j.at("ratio_vs_baseline").is_null()) {
    r.ratio_vs_baseline = j.at("ratio_vs_baseline").get<int>();
  }
}

inline bool operator==(const ForceBin& a, const ForceBin& b) {
  return a.index == b.index && a.count == b.count && a.mae == b.mae;
}

inline bool operator==(const MetricsReport& a, const MetricsReport& b) {
  return a.rmse == b.rmse && a.mae == b.mae && a.rmse_newtons == b.rmse_newtons && a.mae_newtons == b.mae_newtons &&
         a.samples == b.samples && a.ratio_vs_baseline == b.ratio_vs_baseline && a.per_bin_mae == b.per_bin_mae &&
         a.per_object_mae == b.per_object_mae;
}

/// CSV with columns bin,lo_newtons,hi_newtons,count,mae_newtons (hi is empty for the open last bin).
inline std::string bins_csv(const std::vector<ForceBin>& bins, std::size_t n_bins = 11) {
  std::string out = "bin,lo_newtons,hi_newtons,count,mae_newtons\n";
  char line[128];
  for (const ForceBin& b : bins) {
    if (b.index + 1 == n_bins) {
      std::snprintf(line, sizeof line, "%zu,%zu,,%zu,%.17g\n", b.index, b.index, b.count, b.mae);
    } else {
      std::snprintf(line, sizeof line, "%zu,%zu,%zu,%zu,%.17g\n", b.index, b.index, b.index + 1, b.count, b.mae);
    }
    out += line;
  }
  return out;
}

}  // namespace visforce
