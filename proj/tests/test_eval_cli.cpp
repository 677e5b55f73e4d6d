#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "visforce/attention.hpp"
#include "visforce/evaluation.hpp"
#include "visforce/image.hpp"
#include "visforce/metrics.hpp"
#include "visforce/synth.hpp"
#include "visforce/training.hpp"

using namespace visforce;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(Variant v) {
  ModelConfig cfg = ModelConfig::desk(v);
  cfg.backbone.input_size = 16;
  cfg.backbone.channels = {2, 2, 4, 4, 4, 4, 4, 4, 8, 8};
  cfg.lstm_hidden = 4;
  cfg.fc_units = 8;
  return cfg;
}

std::vector<RecordingSet> tiny_corpus(std::size_t sets = 2, std::size_t frames = 12) {
  SynthConfig s;
  s.seed = 21;
  s.n_sets = sets;
  s.frames_per_set = frames;
  s.image_size = 16;
  s.pulses = 2;
  return synth_generate(s);
}

std::unique_ptr<ForceModel> random_model(Variant v, std::uint64_t seed) {
  auto model = std::make_unique<ForceModel>(tiny_model(v));
  initialize(model->params(), seed);
  // nonzero biases so the untrained model gives a varied trace
  std::mt19937_64 gen(seed);
  for (auto& [id, p] : model->params()) {
    if (p.init == Init::zero) p.value = testing_support::random_tensor(p.value.shape(), gen, -0.1, 0.1);
  }
  return model;
}

std::vector<double> brute_force_bins(const std::vector<double>& pred, const std::vector<double>& gt, std::size_t bin) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    std::size_t b = gt[i] < 0 ? 0 : static_cast<std::size_t>(gt[i]);
    if (b > 10) b = 10;
    if (b == bin) {
      sum += std::abs(pred[i] - gt[i]);
      ++n;
    }
  }
  return {static_cast<double>(n), n ? sum / static_cast<double>(n) : 0.0};
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, MaeAndRmseExamples) {
  const std::vector<double> pred = {0, 3}, gt = {1, 1};
  EXPECT_EQ(mae(pred, gt), 1.5);
  EXPECT_NEAR(rmse(pred, gt), std::sqrt(2.5), 1e-15);
  EXPECT_EQ(mae(gt, gt), 0.0);
  EXPECT_EQ(rmse(gt, gt), 0.0);
  EXPECT_THROW(mae(std::vector<double>{}, std::vector<double>{}), ContractViolation);
  EXPECT_THROW(rmse(pred, std::vector<double>{1}), ContractViolation);
}

TEST(Metrics, RmseDominatesMae) {
  std::mt19937_64 gen(501);
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_int_distribution<int> len(1, 50);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(static_cast<std::size_t>(len(gen))), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = u(gen);
      b[i] = u(gen);
    }
    EXPECT_GE(rmse(a, b) + 1e-15, mae(a, b));
    EXPECT_GE(mae(a, b), 0.0);
  }
}

TEST(Metrics, ImprovementRatiosFromReportedMaes) {
  const double baseline = 0.04051;
  EXPECT_EQ(improvement_ratio(baseline, baseline), 100);
  EXPECT_EQ(improvement_ratio(baseline, 0.03700), 109);
  EXPECT_EQ(improvement_ratio(baseline, 0.03662), 111);
  EXPECT_EQ(improvement_ratio(baseline, 0.03400), 119);
  EXPECT_EQ(improvement_ratio(baseline, 0.03416), 119);
  EXPECT_EQ(improvement_ratio(baseline, 0.03320), 122);
  EXPECT_EQ(improvement_ratio(baseline, 0.03183), 127);
  EXPECT_THROW(improvement_ratio(baseline, 0.0), ContractViolation);
}

TEST(Metrics, BinnedMaeExamples) {
  const std::vector<double> gt = {0.1, 0.5, 0.9}, pred = {0.3, 0.3, 1.1};
  const auto bins = binned_mae(pred, gt);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_EQ(bins[0].index, 0u);
  EXPECT_EQ(bins[0].count, 3u);
  EXPECT_NEAR(bins[0].mae, 0.2, 1e-15);

  const auto clamped = binned_mae(std::vector<double>{11.0}, std::vector<double>{11.5});
  ASSERT_EQ(clamped.size(), 1u);
  EXPECT_EQ(clamped[0].index, 10u);
  EXPECT_EQ(binned_mae(std::vector<double>{0.0}, std::vector<double>{-0.5})[0].index, 0u);
}

TEST(Metrics, BinnedMaeMatchesBruteForceAndRecombines) {
  std::mt19937_64 gen(502);
  std::uniform_real_distribution<double> force(0.0, 12.0), noise(-1.5, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> gt(300), pred(300);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = trial % 5 == 0 ? force(gen) * 0.3 : force(gen);
      pred[i] = gt[i] + noise(gen);
    }
    const auto bins = binned_mae(pred, gt);
    double weighted = 0.0;
    std::size_t listed = 0;
    for (std::size_t b = 0; b < 11; ++b) {
      const auto ref = brute_force_bins(pred, gt, b);
      const auto it = std::find_if(bins.begin(), bins.end(), [&](const ForceBin& x) { return x.index == b; });
      if (ref[0] == 0) {
        EXPECT_EQ(it, bins.end()) << "empty bin " << b << " must be absent";
        continue;
      }
      ASSERT_NE(it, bins.end());
      EXPECT_EQ(static_cast<double>(it->count), ref[0]);
      EXPECT_NEAR(it->mae, ref[1], 1e-12);
      weighted += it->mae * static_cast<double>(it->count);
      ++listed;
    }
    EXPECT_EQ(listed, bins.size());
    EXPECT_NEAR(weighted / 300.0, mae(pred, gt), 1e-12);
  }
}

TEST(Metrics, ReportJsonRoundTripAndBinsCsv) {
  MetricsReport r;
  r.rmse = 0.1;
  r.mae = 0.05;
  r.rmse_newtons = 1.2;
  r.mae_newtons = 0.6;
  r.samples = 42;
  r.ratio_vs_baseline = 115;
  r.per_bin_mae = {{0, 10, 0.25}, {10, 2, 1.5}};
  r.per_object_mae = {{"sponge", 0.04}, {"tube", 0.06}};
  EXPECT_EQ(nlohmann::json(r).get<MetricsReport>(), r);
  r.ratio_vs_baseline.reset();
  const nlohmann::json j = r;
  EXPECT_TRUE(j.at("ratio_vs_baseline").is_null());
  EXPECT_EQ(j.get<MetricsReport>(), r);
  EXPECT_EQ(bins_csv(r.per_bin_mae), "bin,lo_newtons,hi_newtons,count,mae_newtons\n0,0,1,10,0.25\n10,10,,2,1.5\n");
}

// ---------------------------------------------------------------------------
// Traces and evaluation
// ---------------------------------------------------------------------------

TEST(Trace, ZeroModelGivesFlatZeroTrace) {
  const auto sets = tiny_corpus(1, 15);
  ForceModel zero(tiny_model(Variant::ssam));
  const ForceTrace t = predict_trace(zero, sets[0], 5);
  EXPECT_EQ(t.set_id, sets[0].id);
  ASSERT_EQ(t.predicted_newtons.size(), sets[0].size());
  for (double v : t.predicted_newtons) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(t.ground_truth_newtons, sets[0].forces);
}

TEST(Trace, SelfEnsembleEqualsSingleModel) {
  const auto sets = tiny_corpus(1, 15);
  const auto a = random_model(Variant::scam, 3);
  const ForceModel* pair[] = {a.get(), a.get()};
  EXPECT_EQ(predict_trace(pair, sets[0], 5).predicted_newtons, predict_trace(*a, sets[0], 5).predicted_newtons);
}

TEST(Trace, EnsembleAveragesMemberTraces) {
  const auto sets = tiny_corpus(1, 15);
  const auto a = random_model(Variant::ssam, 4);
  const auto b = random_model(Variant::scam, 5);
  const ForceModel* pair[] = {a.get(), b.get()};
  const auto fused = predict_trace(pair, sets[0], 5).predicted_newtons;
  const auto ta = predict_trace(*a, sets[0], 5).predicted_newtons;
  const auto tb = predict_trace(*b, sets[0], 5).predicted_newtons;
  const auto mean = ensemble_average(ta, tb);
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], mean[i], 1e-13);
  EXPECT_NE(ta, tb);
}

TEST(Trace, SlidingWindowsMatchTrainingForward) {
  const auto sets = tiny_corpus(2, 11);
  const auto model = random_model(Variant::ssam, 6);
  const auto pred = predict_set(*model, sets[1], 4, 3);
  std::vector<WindowRef> windows;
  for (std::size_t f = 0; f < sets[1].size(); ++f) windows.push_back({1, f});
  Tape tape;
  EncodeCache cache(tape, *model, sets);
  const Tensor ref = forward_windows(tape, *model, cache, windows, 4).value();
  ASSERT_EQ(pred.size(), ref.size());
  for (std::size_t i = 0; i < pred.size(); ++i) EXPECT_NEAR(pred[i], ref[i], 1e-13);
}

TEST(Trace, IsReproducibleAndCsvFormatted) {
  const auto sets = tiny_corpus(1, 6);
  const auto model = random_model(Variant::baseline, 7);
  const std::string a = trace_csv(predict_trace(*model, sets[0], 3));
  const std::string b = trace_csv(predict_trace(*model, sets[0], 3));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.rfind("frame,gt_newtons,pred_newtons\n0,", 0), 0u);
  EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 7);
}

TEST(Evaluate, ReportIsConsistentAcrossScales) {
  const auto sets = tiny_corpus(3, 12);
  const auto model = random_model(Variant::ssam, 8);
  const Evaluation ev = evaluate(*model, sets, 4, 0.5);
  const MetricsReport& r = ev.report;
  EXPECT_EQ(r.samples, 36u);
  EXPECT_EQ(ev.traces.size(), 3u);
  EXPECT_NEAR(r.mae_newtons, 12.0 * r.mae, 1e-12);
  EXPECT_NEAR(r.rmse_newtons, 12.0 * r.rmse, 1e-12);
  EXPECT_GE(r.rmse, r.mae);
  ASSERT_TRUE(r.ratio_vs_baseline.has_value());
  EXPECT_EQ(*r.ratio_vs_baseline, improvement_ratio(0.5, r.mae));
  EXPECT_EQ(r.per_object_mae.size(), 3u);
  double weighted = 0.0;
  std::size_t total = 0;
  for (const ForceBin& b : r.per_bin_mae) {
    weighted += b.mae * static_cast<double>(b.count);
    total += b.count;
  }
  EXPECT_EQ(total, r.samples);
  EXPECT_NEAR(weighted / static_cast<double>(total), r.mae_newtons, 1e-12);
  EXPECT_FALSE(evaluate(*model, sets, 4).report.ratio_vs_baseline.has_value());
}

TEST(AttentionMaps, ZeroModelIsHalfEverywhere) {
  const auto sets = tiny_corpus(1, 4);
  ForceModel zero(tiny_model(Variant::ssam));
  const auto maps = attention_maps(zero, sets[0]);
  ASSERT_EQ(maps.size(), 4u);
  for (const Tensor& m : maps) EXPECT_EQ(m, Tensor({1, 1, 1}, 0.5));
}

TEST(AttentionMaps, ExportWritesOneCsvPerFrame) {
  const auto sets = tiny_corpus(1, 3);
  ModelConfig cfg = tiny_model(Variant::ssam);
  cfg.backbone.input_size = 32;
  SynthConfig s;
  s.n_sets = 1;
  s.frames_per_set = 3;
  s.image_size = 32;
  const auto big = synth_generate(s);
  ForceModel model(cfg);
  initialize(model.params(), 9);
  const auto dir = testing_support::scratch_dir("attn");
  const auto files = export_attention_maps(model, big[0], dir);
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "attn_00000.csv");
  const std::string text = detail::read_file(files[2]);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_EQ(std::count(text.begin(), text.end(), ','), 2);
  EXPECT_EQ(matrix_csv(Tensor({2, 2, 1}, {1, 0.5, 0.25, 0})), "1,0.5\n0.25,0\n");
  ForceModel baseline(tiny_model(Variant::baseline));
  EXPECT_THROW(attention_maps(baseline, sets[0]), ContractViolation);
}

TEST(LoadModel, RebuildsFromCheckpointMetadata) {
  TrainConfig cfg;
  cfg.model = tiny_model(Variant::cbam);
  const auto model = random_model(Variant::cbam, 10);
  const Checkpoint ckpt = snapshot(model->params(), checkpoint_metadata(cfg, 0));
  const auto back = load_model(ckpt);
  EXPECT_EQ(back->config().variant, Variant::cbam);
  EXPECT_EQ(snapshot(back->params()).tensors, ckpt.tensors);
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

class Cli : public ::testing::Test {
 protected:
  static fs::path dir_;

  static void SetUpTestSuite() {
    dir_ = testing_support::scratch_dir("cli");
    write_config(dir_ / "config.json", "{}");
    ASSERT_EQ(run("synth -o " + (dir_ / "corpus").string() + " --sets 3 --frames 10 --size 16 --seed 4"), 0);
  }

  static void write_config(const fs::path& path, const std::string& train_extra) {
    nlohmann::json train = {{"model",
                             {{"input_size", 16},
                              {"channels", {2, 2, 4, 4, 4, 4, 4, 4, 8, 8}},
                              {"lstm_hidden", 4},
                              {"fc_units", 8},
                              {"reduction", 4},
                              {"cbam_kernel", 3}}},
                            {"epochs", 1},
                            {"batch_size", 4},
                            {"window", 3},
                            {"steps_per_epoch", 2},
                            {"base_lr", 1e-3}};
    train.update(nlohmann::json::parse(train_extra));
    nlohmann::json cfg = {{"train", train}, {"data", {{"manifest", (dir_ / "corpus" / "manifest.csv").string()}}}};
    std::ofstream(path) << "// shared settings\n" << cfg.dump(2);
  }

  static int run(const std::string& args) {
    const std::string cmd = std::string(VISFORCE_CLI_PATH) + " " + args + " > " + (dir_ / "last.log").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string config() { return " -c " + (dir_ / "config.json").string(); }
  static std::string path(const std::string& name) { return (dir_ / name).string(); }
  static std::string slurp(const std::string& name) { return detail::read_file(dir_ / name); }
  static std::string log() { return slurp("last.log"); }
};

fs::path Cli::dir_;

TEST_F(Cli, SynthIsSeedDeterministic) {
  ASSERT_EQ(run("synth -o " + path("again") + " --sets 3 --frames 10 --size 16 --seed 4"), 0) << log();
  for (const char* f : {"manifest.csv", "set_001/forces.csv", "set_002/frame_00007.pgm"}) {
    EXPECT_EQ(slurp(std::string("corpus/") + f), slurp(std::string("again/") + f)) << f;
  }
}

TEST_F(Cli, TrainTwiceIsBitwiseIdentical) {
  for (const char* run_name : {"a", "b"}) {
    ASSERT_EQ(run("train" + config() + " --variant ssam --split all --seed 5 -o " + path(std::string(run_name) + ".ckpt") +
                  " --log " + path(std::string(run_name) + ".csv")),
              0)
        << log();
  }
  EXPECT_EQ(slurp("a.ckpt"), slurp("b.ckpt"));
  EXPECT_EQ(slurp("a.csv"), slurp("b.csv"));
  const std::string log_text = slurp("a.csv");
  EXPECT_EQ(std::count(log_text.begin(), log_text.end(), '\n'), 3);
}

TEST_F(Cli, EvalTraceAndAttentionOutputs) {
  ASSERT_EQ(run("train" + config() + " --variant ssam --split all -o " + path("s.ckpt") + " --log " + path("s.csv")), 0)
      << log();
  ASSERT_EQ(run("train" + config() + " --variant scam --split all --seed 9 -o " + path("c.ckpt") + " --log " +
                path("c.csv")),
            0)
      << log();

  ASSERT_EQ(run("eval" + config() + " --split all -k " + path("s.ckpt") + " -k " + path("c.ckpt") +
                " --baseline-mae 0.2 --json " + path("m.json") + " --bins " + path("bins.csv")),
            0)
      << log();
  const auto report = nlohmann::json::parse(slurp("m.json")).get<MetricsReport>();
  EXPECT_EQ(report.samples, 30u);
  EXPECT_TRUE(report.ratio_vs_baseline.has_value());
  EXPECT_EQ(slurp("bins.csv").rfind("bin,lo_newtons,hi_newtons,count,mae_newtons\n", 0), 0u);

  ASSERT_EQ(run("trace" + config() + " -k " + path("s.ckpt") + " --set set_001 -o " + path("t1.csv")), 0) << log();
  ASSERT_EQ(run("trace" + config() + " -k " + path("s.ckpt") + " --set set_001 -o " + path("t2.csv")), 0) << log();
  EXPECT_EQ(slurp("t1.csv"), slurp("t2.csv"));
  const std::string trace_text = slurp("t1.csv");
  EXPECT_EQ(std::count(trace_text.begin(), trace_text.end(), '\n'), 11);

  ASSERT_EQ(run("attnmap" + config() + " -k " + path("s.ckpt") + " --set set_000 -o " + path("maps")), 0) << log();
  EXPECT_TRUE(fs::exists(dir_ / "maps" / "attn_00009.csv"));
  EXPECT_EQ(run("attnmap" + config() + " -k " + path("c.ckpt") + " --set set_000 -o " + path("maps2")), 1);
  EXPECT_EQ(run("trace" + config() + " -k " + path("s.ckpt") + " --set nope -o " + path("t3.csv")), 1);
}

TEST_F(Cli, GradcheckPassesAndPrintsTable) {
  EXPECT_EQ(run("gradcheck"), 0) << log();
  const std::string out = log();
  EXPECT_NE(out.find("ssam"), std::string::npos);
  EXPECT_NE(out.find("scam"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, ExitCodesFollowErrorKind) {
  EXPECT_EQ(run("train -m " + path("missing/manifest.csv") + " --epochs 1"), 2) << log();
  EXPECT_EQ(run("train" + config() + " --variant transformer"), 1) << log();
  EXPECT_EQ(run("eval" + config() + " -k " + path("nothing.ckpt")), 2) << log();
  EXPECT_EQ(run("train --no-such-flag"), 1) << log();
  EXPECT_EQ(run("train" + config() + " --split all --lr 1e300 --epochs 2 -o " + path("nan.ckpt") + " --log " +
                path("nan.csv")),
            3)
      << log();
  EXPECT_TRUE(fs::exists(dir_ / "nan.ckpt"));

  std::ofstream(dir_ / "bad_section.json") << "{\"optimizer\": {}}";
  EXPECT_EQ(run("train -c " + path("bad_section.json")), 1) << log();
  std::ofstream(dir_ / "broken.json") << "{\"train\": ";
  EXPECT_EQ(run("train -c " + path("broken.json")), 1) << log();
  std::ofstream(dir_ / "garbage.ckpt") << "not a checkpoint";
  EXPECT_EQ(run("trace" + config() + " -k " + path("garbage.ckpt") + " --set set_000"), 2) << log();
}
