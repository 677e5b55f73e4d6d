#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "visforce/attention.hpp"
#include "visforce/autodiff.hpp"
#include "visforce/gradcheck.hpp"
#include "visforce/model.hpp"
#include "visforce/ops.hpp"
#include "visforce/rng.hpp"
#include "visforce/temporal.hpp"

namespace visforce {

struct BlockCheck {
  std::string block;
  GradCheckResult result;
  double seconds = 0.0;
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Everything a block check needs: its parameters (inputs included) and a scalar forward.
struct GradCase {
  ParameterSet params;
  std::vector<std::shared_ptr<void>> owned;  // keeps blocks alive for the forward closure
  ForwardFn forward;
};

/// sum(y * r) for a fixed random r, so every output entry gets an O(1) upstream gradient.
inline ForwardFn weighted_sum(std::function<Var(Tape&)> output, Shape shape, Rng& rng) {
  auto weights = std::make_shared<Tensor>(random_tensor(std::move(shape), rng, 0.5, 1.5));
  return [output = std::move(output), weights](Tape& tape) { return sum(mul(output(tape), tape.constant(*weights))); };
}

inline void randomize(ParameterSet& params, Rng& rng, double scale = 0.5) {
  for (auto& [id, p] : params) {
    for (double& v : p.value.data()) v = rng.uniform(-scale, scale);
  }
}

}  // namespace detail

/// Central-difference check of every differentiable block at reduced shapes.
inline std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed = 7, double eps = 1e-5) {
  using detail::GradCase;
  using detail::random_tensor;
  using detail::weighted_sum;

  std::vector<std::pair<std::string, std::function<void(GradCase&, Rng&)>>> blocks;

  blocks.emplace_back("conv", [](GradCase& c, Rng& rng) {
    Parameter& x = c.params.add("input", random_tensor({5, 6, 2}, rng));
    Parameter& k = c.params.add("kernel", random_tensor({3, 3, 2, 3}, rng));
    Parameter& k2 = c.params.add("kernel_strided", random_tensor({3, 3, 2, 2}, rng));
    auto same = weighted_sum([&](Tape& t) { return conv2d(t.parameter(x), t.parameter(k), 1, Padding::same); },
                             {5, 6, 3}, rng);
    auto strided = weighted_sum([&](Tape& t) { return conv2d(t.parameter(x), t.parameter(k2), 2, Padding::valid); },
                                {2, 2, 2}, rng);
    c.forward = [same, strided](Tape& t) { return add(same(t), strided(t)); };
  });

  blocks.emplace_back("maxpool", [](GradCase& c, Rng& rng) {
    Parameter& x = c.params.add("input", random_tensor({4, 6, 3}, rng));
    c.forward = weighted_sum([&](Tape& t) { return maxpool2(t.parameter(x)); }, {2, 3, 3}, rng);
  });

  blocks.emplace_back("gap", [](GradCase& c, Rng& rng) {
    Parameter& x = c.params.add("input", random_tensor({3, 4, 5}, rng));
    c.forward = weighted_sum([&](Tape& t) { return global_average_pool(t.parameter(x)); }, {5}, rng);
  });

  blocks.emplace_back("wap_channels", [](GradCase& c, Rng& rng) {
    Parameter& x = c.params.add("input", random_tensor({3, 4, 6}, rng));
    Parameter& w = c.params.add("weights", random_tensor({6}, rng));
    c.forward = weighted_sum([&](Tape& t) { return wap_over_channels(t.parameter(x), t.parameter(w)); }, {3, 4, 1}, rng);
  });

  blocks.emplace_back("wap_positions", [](GradCase& c, Rng& rng) {
    Parameter& x = c.params.add("input", random_tensor({3, 4, 6}, rng));
    Parameter& w = c.params.add("weights", random_tensor({12}, rng));
    c.forward = weighted_sum([&](Tape& t) { return wap_over_positions(t.parameter(x), t.parameter(w)); }, {6}, rng);
  });

  blocks.emplace_back("ssam", [](GradCase& c, Rng& rng) {
    auto block = std::make_shared<SpatialAttention>(c.params, "ssam/", 2, 4);
    detail::randomize(c.params, rng);
    Parameter& prev = c.params.add("input/prev", random_tensor({3, 3, 4}, rng, 0.0, 1.0));
    Parameter& cur = c.params.add("input/cur", random_tensor({3, 3, 4}, rng, 0.0, 1.0));
    c.owned.push_back(block);
    c.forward = weighted_sum(
        [&, block](Tape& t) {
          const Var maps[] = {t.parameter(prev), t.parameter(cur)};
          return block->refine(t, maps);
        },
        {3, 3, 4}, rng);
  });

  blocks.emplace_back("scam", [](GradCase& c, Rng& rng) {
    auto block = std::make_shared<ChannelAttention>(c.params, "scam/", 2, 4, 3, 3, 2);
    detail::randomize(c.params, rng);
    Parameter& prev = c.params.add("input/prev", random_tensor({3, 3, 4}, rng, 0.0, 1.0));
    Parameter& cur = c.params.add("input/cur", random_tensor({3, 3, 4}, rng, 0.0, 1.0));
    c.owned.push_back(block);
    c.forward = weighted_sum(
        [&, block](Tape& t) {
          const Var maps[] = {t.parameter(prev), t.parameter(cur)};
          return block->refine(t, maps);
        },
        {3, 3, 4}, rng);
  });

  blocks.emplace_back("se", [](GradCase& c, Rng& rng) {
    auto block = std::make_shared<SqueezeExcitation>(c.params, "se/", 4, 2);
    detail::randomize(c.params, rng);
    Parameter& x = c.params.add("input", random_tensor({3, 3, 4}, rng, 0.0, 1.0));
    c.owned.push_back(block);
    c.forward = weighted_sum(
        [&, block](Tape& t) {
          const Var maps[] = {t.parameter(x)};
          return block->refine(t, maps);
        },
        {3, 3, 4}, rng);
  });

  blocks.emplace_back("cbam", [](GradCase& c, Rng& rng) {
    auto block = std::make_shared<Cbam>(c.params, "cbam/", 4, 2, 3);
    detail::randomize(c.params, rng);
    Parameter& x = c.params.add("input", random_tensor({4, 4, 4}, rng, 0.0, 1.0));
    c.owned.push_back(block);
    c.forward = weighted_sum(
        [&, block](Tape& t) {
          const Var maps[] = {t.parameter(x)};
          return block->refine(t, maps);
        },
        {4, 4, 4}, rng);
  });

  blocks.emplace_back("lstm_step", [](GradCase& c, Rng& rng) {
    auto cell = std::make_shared<Lstm>(c.params, "lstm/", 3, 4);
    detail::randomize(c.params, rng);
    Parameter& x = c.params.add("input/x", random_tensor({2, 3}, rng));
    Parameter& h = c.params.add("input/h", random_tensor({2, 4}, rng));
    Parameter& s = c.params.add("input/c", random_tensor({2, 4}, rng));
    c.owned.push_back(cell);
    auto rh = std::make_shared<Tensor>(random_tensor({2, 4}, rng, 0.5, 1.5));
    auto rc = std::make_shared<Tensor>(random_tensor({2, 4}, rng, 0.5, 1.5));
    c.forward = [&, cell, rh, rc](Tape& t) {
      auto [h1, c1] = cell->step(t, t.parameter(x), t.parameter(h), t.parameter(s));
      return add(sum(mul(h1, t.constant(*rh))), sum(mul(c1, t.constant(*rc))));
    };
  });

  blocks.emplace_back("blstm_3step", [](GradCase& c, Rng& rng) {
    auto net = std::make_shared<Blstm>(c.params, "blstm/", 3, 4);
    detail::randomize(c.params, rng);
    std::vector<Parameter*> xs;
    for (int i = 0; i < 3; ++i) xs.push_back(&c.params.add("input/x" + std::to_string(i), random_tensor({2, 3}, rng)));
    c.owned.push_back(net);
    c.forward = weighted_sum(
        [xs, net](Tape& t) {
          std::vector<Var> steps;
          for (Parameter* p : xs) steps.push_back(t.parameter(*p));
          return net->forward(t, steps);
        },
        {2, 8}, rng);
  });

  blocks.emplace_back("head", [](GradCase& c, Rng& rng) {
    auto head = std::make_shared<RegressionHead>(c.params, "head/", 6, 5);
    detail::randomize(c.params, rng);
    Parameter& x = c.params.add("input", random_tensor({3, 6}, rng));
    c.owned.push_back(head);
    c.forward = weighted_sum([&, head](Tape& t) { return head->forward(t, t.parameter(x)); }, {3, 1}, rng);
  });

  blocks.emplace_back("loss", [](GradCase& c, Rng& rng) {
    Parameter& pred = c.params.add("pred", random_tensor({5, 1}, rng));
    auto target = std::make_shared<Tensor>(random_tensor({5, 1}, rng));
    c.forward = [&, target](Tape& t) { return mse_loss(t.parameter(pred), t.constant(*target)); };
  });

  std::vector<BlockCheck> out;
  Rng rng(seed);
  for (auto& [name, build] : blocks) {
    GradCase c;
    build(c, rng);
    const auto start = std::chrono::steady_clock::now();
    BlockCheck check{name, grad_check(c.forward, c.params, eps), 0.0};
    check.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.push_back(std::move(check));
  }
  return out;
}

/// Fixed-width table: block, checked entries, max relative error, worst parameter, verdict.
inline std::string gradcheck_table(const std::vector<BlockCheck>& checks, double tolerance) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %8s %14s  %-22s %s\n", "block", "entries", "max_rel_err", "worst", "result");
  out += line;
  for (const BlockCheck& c : checks) {
    const std::string worst = c.result.worst_parameter + "[" + std::to_string(c.result.worst_index) + "]";
    std::snprintf(line, sizeof line, "%-14s %8zu %14.3e  %-22s %s\n", c.block.c_str(), c.result.checked,
                  c.result.max_relative_error, worst.c_str(), c.result.passed(tolerance) ? "ok" : "FAIL");
    out += line;
    if (!c.result.failure.empty()) out += "  " + c.result.failure + "\n";
  }
  return out;
}

}  // namespace visforce
