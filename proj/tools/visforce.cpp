// Command-line front end: synth, train, eval, trace, attnmap, gradcheck.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "visforce/checkpoint.hpp"
#include "visforce/config.hpp"
#include "visforce/dataset.hpp"
#include "visforce/error.hpp"
#include "visforce/evaluation.hpp"
#include "visforce/gradcheck_suite.hpp"
#include "visforce/metrics.hpp"
#include "visforce/synth.hpp"
#include "visforce/training.hpp"

namespace fs = std::filesystem;
using namespace visforce;

namespace {

enum Exit { kOk = 0, kContract = 1, kIo = 2, kNumerical = 3 };

struct Common {
  std::string config_path;
  std::string manifest;
  std::optional<std::uint64_t> split_seed;
};

AppConfig base_config(const Common& c) {
  AppConfig cfg = c.config_path.empty() ? AppConfig{} : load_config(c.config_path);
  if (!c.manifest.empty()) cfg.manifest = c.manifest;
  if (c.split_seed) cfg.split_seed = *c.split_seed;
  return cfg;
}

std::vector<RecordingSet> load_sets(const std::string& manifest, std::size_t image_size) {
  if (manifest.empty()) throw ConfigError("no manifest given (--manifest or data.manifest in the config)");
  LoadOptions opts;
  opts.image_size = image_size;
  LoadReport report = load_dataset(manifest, opts);
  for (const auto& e : report.errors) std::cerr << "warning: " << e << '\n';
  if (report.sets.empty()) throw IoError("no usable recording sets in " + manifest);
  return std::move(report.sets);
}

/// Applies the protocol split and keeps `which` (train, test or all).
std::vector<RecordingSet> select_split(std::vector<RecordingSet> sets, const std::string& which, std::uint64_t seed) {
  if (which == "all") return sets;
  const SplitResult split = split_protocol(sets, seed);
  for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
  const auto& idx = which == "train" ? split.train : split.test;
  std::vector<RecordingSet> out;
  for (std::size_t i : idx) out.push_back(std::move(sets[i]));
  if (out.empty()) throw ContractViolation("the " + which + " split is empty");
  return out;
}

struct LoadedModels {
  std::vector<std::unique_ptr<ForceModel>> owned;
  std::vector<const ForceModel*> views;
  std::size_t window = 20;
};

LoadedModels load_models(const std::vector<std::string>& paths) {
  LoadedModels m;
  for (const auto& path : paths) {
    const Checkpoint ckpt = load_checkpoint(path);
    auto model = load_model(ckpt);
    const auto meta = nlohmann::json::parse(ckpt.metadata);
    const std::size_t window = meta.at("train").value("window", std::size_t{20});
    if (!m.owned.empty()) {
      if (window != m.window) throw ContractViolation("ensemble members were trained with different window lengths");
      if (model->config().backbone.input_size != m.owned.front()->config().backbone.input_size) {
        throw ContractViolation("ensemble members expect different input sizes");
      }
    }
    m.window = window;
    m.views.push_back(model.get());
    m.owned.push_back(std::move(model));
  }
  return m;
}

const RecordingSet& find_set(const std::vector<RecordingSet>& sets, const std::string& id) {
  for (const auto& s : sets) {
    if (s.id == id) return s;
  }
  throw ContractViolation("no set with id '" + id + "' in the manifest");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual interaction-force estimation: data synthesis, training and evaluation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config file");
    sub->add_option("-m,--manifest", common.manifest, "Dataset manifest (overrides data.manifest)");
    sub->add_option("--split-seed", common.split_seed, "Seed of the train/test split");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Render a synthetic corpus with ground-truth forces");
  std::string synth_out;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_sets, synth_frames, synth_size;
  std::optional<double> synth_noise;
  std::string synth_object;
  synth->add_option("-c,--config", common.config_path, "JSON config file");
  synth->add_option("-o,--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed);
  synth->add_option("--sets", synth_sets);
  synth->add_option("--frames", synth_frames);
  synth->add_option("--size", synth_size);
  synth->add_option("--noise", synth_noise);
  synth->add_option("--object", synth_object, "Use one object for every set");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one model variant");
  add_common(train_cmd);
  std::string ckpt_out = "model.ckpt", log_out = "loss.csv", variant, split_which = "train";
  std::optional<std::size_t> epochs, batch, window, steps, decay_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool desk = false;
  train_cmd->add_option("-o,--out", ckpt_out, "Checkpoint path");
  train_cmd->add_option("--log", log_out, "Loss log CSV path");
  train_cmd->add_option("--variant", variant, "baseline|ssam|scam|se|cbam");
  train_cmd->add_option("--epochs", epochs);
  train_cmd->add_option("--batch", batch);
  train_cmd->add_option("--window", window);
  train_cmd->add_option("--steps-per-epoch", steps);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--decay-every", decay_every);
  train_cmd->add_option("--seed", seed);
  train_cmd->add_option("--split", split_which, "train|test|all")->check(CLI::IsMember({"train", "test", "all"}));
  train_cmd->add_flag("--desk", desk, "Use the narrow 64x64 network (keeps --variant)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Metrics of one model or an ensemble");
  add_common(eval_cmd);
  std::vector<std::string> checkpoints;
  std::string eval_json = "metrics.json", eval_bins = "bins.csv", eval_split = "test";
  std::optional<double> baseline_mae;
  eval_cmd->add_option("-k,--checkpoint", checkpoints, "Checkpoint(s); several are averaged")->required();
  eval_cmd->add_option("--json", eval_json, "MetricsReport output");
  eval_cmd->add_option("--bins", eval_bins, "Per-bin MAE CSV output");
  eval_cmd->add_option("--split", eval_split)->check(CLI::IsMember({"train", "test", "all"}));
  eval_cmd->add_option("--baseline-mae", baseline_mae, "Normalized baseline MAE for the ratio column");

  // trace
  auto* trace_cmd = app.add_subcommand("trace", "Sliding-window force trace of one set");
  add_common(trace_cmd);
  std::string set_id, trace_out = "trace.csv";
  trace_cmd->add_option("-k,--checkpoint", checkpoints, "Checkpoint(s); several are averaged")->required();
  trace_cmd->add_option("--set", set_id, "Set id (manifest path)")->required();
  trace_cmd->add_option("-o,--out", trace_out);

  // attnmap
  auto* attn_cmd = app.add_subcommand("attnmap", "Export spatial attention maps of an ssam model");
  add_common(attn_cmd);
  std::string attn_ckpt, attn_out = "attention";
  attn_cmd->add_option("-k,--checkpoint", attn_ckpt)->required();
  attn_cmd->add_option("--set", set_id)->required();
  attn_cmd->add_option("-o,--out", attn_out, "Output directory");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every block");
  double grad_eps = 1e-5, grad_tol = 1e-4;
  std::uint64_t grad_seed = 7;
  grad_cmd->add_option("--eps", grad_eps);
  grad_cmd->add_option("--tol", grad_tol);
  grad_cmd->add_option("--seed", grad_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kContract;
  }

  try {
    if (synth->parsed()) {
      AppConfig cfg = base_config(common);
      SynthConfig& s = cfg.synth;
      if (synth_seed) s.seed = *synth_seed;
      if (synth_sets) s.n_sets = *synth_sets;
      if (synth_frames) s.frames_per_set = *synth_frames;
      if (synth_size) s.image_size = *synth_size;
      if (synth_noise) s.noise = *synth_noise;
      if (!synth_object.empty()) s.object = parse_object(synth_object);
      const auto manifest = write_corpus(synth_out, synth_generate(s));
      std::cout << manifest.string() << '\n';
    } else if (train_cmd->parsed()) {
      AppConfig cfg = base_config(common);
      TrainConfig& t = cfg.train;
      const Variant v = variant.empty() ? t.model.variant : parse_variant(variant);
      if (desk) t.model = ModelConfig::desk(v);
      t.model.variant = v;
      if (epochs) t.epochs = *epochs;
      if (batch) t.batch_size = *batch;
      if (window) t.window = *window;
      if (steps) t.steps_per_epoch = *steps;
      if (lr) t.base_lr = *lr;
      if (decay_every) t.decay_every = *decay_every;
      if (seed) t.seed = *seed;
      t.validate();
      const auto sets =
          select_split(load_sets(cfg.manifest, t.model.backbone.input_size), split_which, cfg.split_seed);
      std::size_t last_epoch = static_cast<std::size_t>(-1);
      double epoch_sum = 0.0;
      std::size_t epoch_steps = 0;
      auto report = [&](const LossRecord& r) {
        if (r.epoch != last_epoch && epoch_steps > 0) {
          std::fprintf(stderr, "epoch %zu  mean loss %.6g\n", last_epoch, epoch_sum / epoch_steps);
          epoch_sum = 0.0;
          epoch_steps = 0;
        }
        last_epoch = r.epoch;
        epoch_sum += r.loss;
        ++epoch_steps;
      };
      TrainResult result = train(t, sets, report);
      if (epoch_steps > 0) std::fprintf(stderr, "epoch %zu  mean loss %.6g\n", last_epoch, epoch_sum / epoch_steps);
      save_checkpoint(ckpt_out, result.checkpoint);
      write_text(log_out, loss_log_csv(result.log));
      if (result.aborted) {
        std::cerr << "error: training aborted: " << result.abort_reason << " (last good parameters saved to "
                  << ckpt_out << ")\n";
        return kNumerical;
      }
    } else if (eval_cmd->parsed()) {
      AppConfig cfg = base_config(common);
      LoadedModels models = load_models(checkpoints);
      const auto sets = select_split(load_sets(cfg.manifest, models.owned.front()->config().backbone.input_size),
                                     eval_split, cfg.split_seed);
      const Evaluation ev = evaluate(models.views, sets, models.window, baseline_mae);
      write_text(eval_json, nlohmann::json(ev.report).dump(2) + "\n");
      write_text(eval_bins, bins_csv(ev.report.per_bin_mae));
      std::printf("samples %zu  mae %.6f  rmse %.6f  (newtons: mae %.4f  rmse %.4f)\n", ev.report.samples,
                  ev.report.mae, ev.report.rmse, ev.report.mae_newtons, ev.report.rmse_newtons);
    } else if (trace_cmd->parsed()) {
      AppConfig cfg = base_config(common);
      LoadedModels models = load_models(checkpoints);
      const auto sets = load_sets(cfg.manifest, models.owned.front()->config().backbone.input_size);
      write_text(trace_out, trace_csv(predict_trace(models.views, find_set(sets, set_id), models.window)));
    } else if (attn_cmd->parsed()) {
      AppConfig cfg = base_config(common);
      auto model = load_model(fs::path(attn_ckpt));
      const auto sets = load_sets(cfg.manifest, model->config().backbone.input_size);
      const auto written = export_attention_maps(*model, find_set(sets, set_id), attn_out);
      std::cout << written.size() << " maps written to " << attn_out << '\n';
    } else if (grad_cmd->parsed()) {
      const auto checks = run_gradcheck_suite(grad_seed, grad_eps);
      std::cout << gradcheck_table(checks, grad_tol);
      for (const auto& c : checks) {
        if (!c.result.passed(grad_tol)) return kNumerical;
      }
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kContract;
  }
  return kOk;
}
