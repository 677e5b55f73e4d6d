#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "visforce/error.hpp"
#include "visforce/image.hpp"
#include "visforce/rng.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// Largest pressing force of the recording rig; forces are divided by this for training.
inline constexpr double kMaxForceNewtons = 12.0;

enum class ObjectKind { sponge, paper_cup, tube, stapler };

inline constexpr ObjectKind kObjects[] = {ObjectKind::sponge, ObjectKind::paper_cup, ObjectKind::tube,
                                          ObjectKind::stapler};
inline constexpr int kAngles[] = {0, 10, 20, 30};
inline constexpr int kLuxLevels[] = {350, 550, 750};

inline std::string to_string(ObjectKind o) {
  switch (o) {
    case ObjectKind::sponge: return "sponge";
    case ObjectKind::paper_cup: return "paper_cup";
    case ObjectKind::tube: return "tube";
    case ObjectKind::stapler: return "stapler";
  }
  return "sponge";
}

inline ObjectKind parse_object(const std::string& name) {
  for (ObjectKind o : kObjects) {
    if (to_string(o) == name) return o;
  }
  throw ConfigError("unknown object '" + name + "' (expected sponge|paper_cup|tube|stapler)");
}

struct FrameFile {
  std::filesystem::path path;
  std::int64_t timestamp_ns = 0;
};

/// One contiguous recording under a fixed object, pressing angle and illumination.
struct RecordingSet {
  std::string id;
  ObjectKind object = ObjectKind::sponge;
  int angle_deg = 0;
  int lux = 550;
  std::vector<FrameFile> files;  // empty for sets that exist only in memory
  std::vector<double> forces;    // newtons, one per frame
  std::vector<Tensor> frames;    // preprocessed size x size x 1 frames (empty until loaded)

  std::size_t size() const { return forces.size(); }
};

// ---------------------------------------------------------------------------
// Timestamp synchronization
// ---------------------------------------------------------------------------

/// For every frame timestamp, the index of the nearest sample timestamp (ties pick the earlier
/// sample). Both sequences must be sorted ascending and `samples` nonempty.
inline std::vector<std::size_t> match_nearest(const std::vector<std::int64_t>& frames,
                                              const std::vector<std::int64_t>& samples) {
  if (samples.empty()) throw ContractViolation("match_nearest: no samples");
  std::vector<std::size_t> out;
  out.reserve(frames.size());
  for (std::int64_t t : frames) {
    auto it = std::lower_bound(samples.begin(), samples.end(), t);
    std::size_t idx;
    if (it == samples.begin()) {
      idx = 0;
    } else if (it == samples.end()) {
      idx = samples.size() - 1;
    } else {
      const auto after = static_cast<std::size_t>(it - samples.begin());
      idx = (t - samples[after - 1] <= *it - t) ? after - 1 : after;
    }
    out.push_back(idx);
  }
  return out;
}

struct SyncResult {
  std::vector<double> forces;
  std::int64_t max_offset_ns = 0;
  std::string error;  // empty on success

  bool ok() const { return error.empty(); }
};

/// Pairs each frame with the nearest force sample. Rejects non-increasing timestamps and any
/// pairing farther apart than the tolerance (default: half the largest force sampling interval).
inline SyncResult synchronize(const std::vector<std::int64_t>& frame_ts, const std::vector<std::int64_t>& force_ts,
                              const std::vector<double>& force_values,
                              std::optional<std::int64_t> tolerance_ns = std::nullopt) {
  SyncResult r;
  if (force_ts.empty() || force_ts.size() != force_values.size()) {
    r.error = "force log is empty or malformed";
    return r;
  }
  auto strictly_increasing = [](const std::vector<std::int64_t>& ts) {
    return std::adjacent_find(ts.begin(), ts.end(), std::greater_equal<>()) == ts.end();
  };
  if (!strictly_increasing(frame_ts)) {
    r.error = "frame timestamps are not strictly increasing";
    return r;
  }
  if (!strictly_increasing(force_ts)) {
    r.error = "force timestamps are not strictly increasing";
    return r;
  }
  std::int64_t tolerance = 0;
  if (tolerance_ns) {
    tolerance = *tolerance_ns;
  } else {
    for (std::size_t i = 1; i < force_ts.size(); ++i) tolerance = std::max(tolerance, force_ts[i] - force_ts[i - 1]);
    tolerance /= 2;
  }
  const auto nearest = match_nearest(frame_ts, force_ts);
  for (std::size_t i = 0; i < frame_ts.size(); ++i) {
    const std::int64_t offset = std::abs(frame_ts[i] - force_ts[nearest[i]]);
    r.max_offset_ns = std::max(r.max_offset_ns, offset);
    if (offset > tolerance) {
      r.error = "frame " + std::to_string(i) + " is " + std::to_string(offset) +
                " ns from the nearest force sample (tolerance " + std::to_string(tolerance) + " ns)";
      r.forces.clear();
      return r;
    }
    r.forces.push_back(force_values[nearest[i]]);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Manifest and on-disk corpus
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::filesystem::path path;  // set directory, relative to the manifest
  ObjectKind object = ObjectKind::sponge;
  int angle_deg = 0;
  int lux = 550;
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  return out;
}

/// Data lines of a CSV file, skipping blanks, '#' comments and a header whose first field is `header`.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    auto fields = split_csv(line);
    if (rows.empty() && !fields.empty() && fields[0] == header) continue;
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline std::int64_t parse_i64(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("invalid integer '" + s + "' in " + where);
  }
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("invalid number '" + s + "' in " + where);
  }
}

}  // namespace detail

/// Manifest: one line per set, "path,object,angle_deg,lux" (header and '#' comments allowed).
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::vector<ManifestEntry> entries;
  for (const auto& f : detail::read_csv(manifest, "path")) {
    if (f.size() != 4) throw IoError("manifest line needs path,object,angle_deg,lux: " + manifest.string());
    ManifestEntry e;
    e.path = f[0];
    e.object = parse_object(f[1]);
    e.angle_deg = static_cast<int>(detail::parse_i64(f[2], manifest.string()));
    e.lux = static_cast<int>(detail::parse_i64(f[3], manifest.string()));
    entries.push_back(std::move(e));
  }
  return entries;
}

struct LoadOptions {
  std::size_t image_size = 128;
  bool load_images = true;
  std::optional<std::int64_t> tolerance_ns;
};

struct LoadReport {
  std::vector<RecordingSet> sets;
  std::vector<std::string> errors;  // one entry per rejected set or skipped frame
};

/// Loads every set listed in the manifest. A set directory holds frames.csv (timestamp_ns,file)
/// and forces.csv (timestamp_ns,force_newtons). Sets with missing files, non-monotonic
/// timestamps or unmatched frames are rejected and reported; unreadable frames are skipped.
inline LoadReport load_dataset(const std::filesystem::path& manifest, const LoadOptions& opts = {}) {
  LoadReport report;
  const auto root = manifest.parent_path();
  for (const ManifestEntry& entry : read_manifest(manifest)) {
    const auto dir = root / entry.path;
    const std::string id = entry.path.generic_string();
    try {
      RecordingSet set;
      set.id = id;
      set.object = entry.object;
      set.angle_deg = entry.angle_deg;
      set.lux = entry.lux;

      std::vector<std::int64_t> frame_ts;
      std::vector<std::string> missing;
      for (const auto& f : detail::read_csv(dir / "frames.csv", "timestamp_ns")) {
        if (f.size() != 2) throw IoError("frames.csv rows need timestamp_ns,file");
        FrameFile ff{dir / f[1], detail::parse_i64(f[0], (dir / "frames.csv").string())};
        if (!std::filesystem::exists(ff.path)) missing.push_back(f[1]);
        frame_ts.push_back(ff.timestamp_ns);
        set.files.push_back(std::move(ff));
      }
      if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 5; ++i) list += (i ? ", " : "") + missing[i];
        if (missing.size() > 5) list += ", ...";
        report.errors.push_back(id + ": " + std::to_string(missing.size()) + " missing frame files (" + list + ")");
        continue;
      }
      if (set.files.empty()) {
        report.errors.push_back(id + ": no frames listed");
        continue;
      }

      std::vector<std::int64_t> force_ts;
      std::vector<double> force_values;
      for (const auto& f : detail::read_csv(dir / "forces.csv", "timestamp_ns")) {
        if (f.size() != 2) throw IoError("forces.csv rows need timestamp_ns,force_newtons");
        force_ts.push_back(detail::parse_i64(f[0], (dir / "forces.csv").string()));
        force_values.push_back(detail::parse_double(f[1], (dir / "forces.csv").string()));
      }
      SyncResult sync = synchronize(frame_ts, force_ts, force_values, opts.tolerance_ns);
      if (!sync.ok()) {
        report.errors.push_back(id + ": " + sync.error);
        continue;
      }
      set.forces = std::move(sync.forces);

      if (opts.load_images) {
        std::vector<FrameFile> kept_files;
        std::vector<double> kept_forces;
        for (std::size_t i = 0; i < set.files.size(); ++i) {
          try {
            set.frames.push_back(preprocess_frame(read_image(set.files[i].path), opts.image_size));
            kept_files.push_back(set.files[i]);
            kept_forces.push_back(set.forces[i]);
          } catch (const IoError& e) {
            report.errors.push_back(id + ": skipped frame " + set.files[i].path.filename().string() + " (" +
                                    e.what() + ")");
          }
        }
        set.files = std::move(kept_files);
        set.forces = std::move(kept_forces);
        if (set.frames.empty()) {
          report.errors.push_back(id + ": no readable frames");
          continue;
        }
      }
      report.sets.push_back(std::move(set));
    } catch (const IoError& e) {
      report.errors.push_back(id + ": " + e.what());
    }
  }
  return report;
}

/// Writes sets (with in-memory frames) as PGM images plus frames.csv/forces.csv per set and a
/// manifest.csv at the root. Sets without file timestamps get 149 Hz timestamps.
inline std::filesystem::path write_corpus(const std::filesystem::path& root, const std::vector<RecordingSet>& sets) {
  std::filesystem::create_directories(root);
  const auto manifest_path = root / "manifest.csv";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot write " + manifest_path.string());
  manifest << "path,object,angle_deg,lux\n";
  for (const RecordingSet& set : sets) {
    if (set.frames.size() != set.forces.size()) {
      throw ContractViolation("write_corpus: set " + set.id + " has no in-memory frames");
    }
    const auto dir = root / set.id;
    std::filesystem::create_directories(dir);
    std::ofstream frames(dir / "frames.csv");
    std::ofstream forces(dir / "forces.csv");
    if (!frames || !forces) throw IoError("cannot write csv files in " + dir.string());
    frames << "timestamp_ns,file\n";
    forces << "timestamp_ns,force_newtons\n";
    char name[32];
    char value[64];
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::int64_t ts = i < set.files.size() ? set.files[i].timestamp_ns
                                                   : static_cast<std::int64_t>(std::llround(i * 1e9 / 149.0));
      std::snprintf(name, sizeof name, "frame_%05zu.pgm", i);
      write_pnm(dir / name, to_image(set.frames[i]));
      std::snprintf(value, sizeof value, "%.17g", set.forces[i]);
      frames << ts << ',' << name << '\n';
      forces << ts << ',' << value << '\n';
    }
    manifest << set.id << ',' << to_string(set.object) << ',' << set.angle_deg << ',' << set.lux << '\n';
  }
  return manifest_path;
}

// ---------------------------------------------------------------------------
// Train/test protocol
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<std::size_t> train;  // indices into the input set list, ascending
  std::vector<std::size_t> test;
  std::vector<std::string> warnings;
};

/// Per object, round(20%) of its sets go to test, picked round-robin across the
/// (angle, lux) condition cells after a seeded shuffle inside each cell. A corpus of
/// 15 sets in each of the 12 cells yields 144 train / 36 test sets per object.
inline SplitResult split_protocol(const std::vector<RecordingSet>& sets, std::uint64_t seed) {
  SplitResult result;
  std::vector<bool> is_test(sets.size(), false);
  for (ObjectKind object : kObjects) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (sets[i].object == object) cells[{sets[i].angle_deg, sets[i].lux}].push_back(i);
    }
    if (cells.empty()) continue;
    for (int angle : kAngles) {
      for (int lux : kLuxLevels) {
        if (!cells.count({angle, lux})) {
          result.warnings.push_back("no sets for " + to_string(object) + " at " + std::to_string(angle) + " deg, " +
                                    std::to_string(lux) + " lux; cell skipped");
        }
      }
    }
    Rng rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(object) + 1);
    std::size_t total = 0, longest = 0;
    for (auto& [cell, members] : cells) {
      for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.index(i)]);
      total += members.size();
      longest = std::max(longest, members.size());
    }
    const std::size_t n_test = (total * 2 + 5) / 10;  // round(0.2 * total), halves up
    std::size_t picked = 0;
    for (std::size_t round = 0; round < longest && picked < n_test; ++round) {
      for (auto& [cell, members] : cells) {
        if (picked == n_test) break;
        if (round < members.size()) {
          is_test[members[round]] = true;
          ++picked;
        }
      }
    }
  }
  for (std::size_t i = 0; i < sets.size(); ++i) (is_test[i] ? result.test : result.train).push_back(i);
  return result;
}

}  // namespace visforce
