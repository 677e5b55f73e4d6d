#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "support.hpp"
#include "visforce/attention.hpp"
#include "visforce/autodiff.hpp"
#include "visforce/backbone.hpp"
#include "visforce/checkpoint.hpp"
#include "visforce/gradcheck.hpp"
#include "visforce/model.hpp"
#include "visforce/ops.hpp"

using namespace visforce;
using testing_support::max_abs_diff;
using testing_support::random_tensor;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

TEST(Tensor, ShapeMustBePositiveAndMatchData) {
  EXPECT_THROW(Tensor({2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, ChannelFastestLayout) {
  Tensor t({2, 3, 4});
  t.at(1, 2, 3) = 7.0;
  EXPECT_EQ(t[(1 * 3 + 2) * 4 + 3], 7.0);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, OneByOneKernelScales) {
  Tape tape;
  Var x = tape.constant(Tensor({2, 2, 1}, {1, 2, 3, 4}));
  Var k = tape.constant(Tensor({1, 1, 1, 1}, {2}));
  EXPECT_EQ(conv2d(x, k).value(), Tensor({2, 2, 1}, {2, 4, 6, 8}));
}

TEST(Conv2d, ValidOnesSumsWindow) {
  Tape tape;
  Var x = tape.constant(Tensor({3, 3, 1}, 1.0));
  Var k = tape.constant(Tensor({3, 3, 1, 1}, 1.0));
  EXPECT_EQ(conv2d(x, k, 1, Padding::valid).value(), Tensor({1, 1, 1}, {9}));
}

TEST(Conv2d, MatchesNestedLoopReference) {
  std::mt19937_64 gen(11);
  for (std::size_t stride : {1u, 2u}) {
    for (bool same : {true, false}) {
      const Tensor x = random_tensor({5, 5, 2}, gen);
      const Tensor k = random_tensor({3, 3, 2, 4}, gen);
      Tape tape;
      const Tensor out = conv2d(tape.constant(x), tape.constant(k), stride, same ? Padding::same : Padding::valid).value();
      const Tensor ref = testing_support::conv_reference(x, k, stride, same);
      ASSERT_EQ(out.shape(), ref.shape());
      EXPECT_LT(max_abs_diff(out, ref), 1e-12) << "stride " << stride << " same " << same;
    }
  }
}

TEST(Conv2d, WideChannelsMatchReference) {
  std::mt19937_64 gen(12);
  const Tensor x = random_tensor({6, 7, 11}, gen);
  const Tensor k = random_tensor({3, 3, 11, 19}, gen);
  Tape tape;
  const Tensor out = conv2d(tape.constant(x), tape.constant(k)).value();
  EXPECT_LT(max_abs_diff(out, testing_support::conv_reference(x, k, 1, true)), 1e-12);
}

TEST(Conv2d, SamePaddingPreservesSize) {
  Tape tape;
  Var out = conv2d(tape.constant(Tensor({7, 9, 3})), tape.constant(Tensor({3, 3, 3, 5})));
  EXPECT_EQ(out.shape(), (Shape{7, 9, 5}));
}

TEST(Conv2d, IdentityKernelIsIdentity) {
  std::mt19937_64 gen(13);
  const Tensor x = random_tensor({4, 5, 1}, gen);
  Tape tape;
  EXPECT_EQ(conv2d(tape.constant(x), tape.constant(Tensor({1, 1, 1, 1}, {1.0}))).value(), x);
}

TEST(Conv2d, RejectsBadShapes) {
  Tape tape;
  Var x = tape.constant(Tensor({4, 4, 2}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({3, 3, 3, 1}))), ShapeError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({5, 5, 2, 1})), 1, Padding::valid), ShapeError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor({3, 3, 2, 1})), 0), ShapeError);
}

// ---------------------------------------------------------------------------
// maxpool2, GAP
// ---------------------------------------------------------------------------

TEST(Maxpool2, TakesWindowMaximum) {
  Tape tape;
  EXPECT_EQ(maxpool2(tape.constant(Tensor({2, 2, 1}, {1, 2, 3, 4}))).value(), Tensor({1, 1, 1}, {4}));
}

TEST(Maxpool2, ConstantStaysConstant) {
  Tape tape;
  EXPECT_EQ(maxpool2(tape.constant(Tensor({6, 4, 2}, -1.25))).value(), Tensor({3, 2, 2}, -1.25));
}

TEST(Maxpool2, MatchesReference) {
  std::mt19937_64 gen(21);
  const Tensor x = random_tensor({8, 8, 3}, gen);
  Tape tape;
  EXPECT_EQ(maxpool2(tape.constant(x)).value(), testing_support::maxpool_reference(x));
}

TEST(Maxpool2, OddSizeIsRejected) {
  Tape tape;
  EXPECT_THROW(maxpool2(tape.constant(Tensor({3, 4, 1}))), ShapeError);
  EXPECT_THROW(maxpool2(tape.constant(Tensor({4, 5, 1}))), ShapeError);
}

TEST(GlobalAveragePool, ConstantAndMean) {
  Tape tape;
  EXPECT_EQ(global_average_pool(tape.constant(Tensor({3, 5, 4}, 0.75))).value(), Tensor({4}, 0.75));
  EXPECT_EQ(global_average_pool(tape.constant(Tensor({2, 2, 1}, {1, 2, 3, 4}))).value(), Tensor({1}, {2.5}));
}

TEST(GlobalAveragePool, MatchesReference) {
  std::mt19937_64 gen(22);
  const Tensor x = random_tensor({8, 8, 256}, gen);
  Tape tape;
  EXPECT_LT(max_abs_diff(global_average_pool(tape.constant(x)).value(), testing_support::gap_reference(x)), 1e-12);
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting
// ---------------------------------------------------------------------------

TEST(Elementwise, SigmoidAndRelu) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(1.0), 0.7310585786300048792511592418, 1e-15);
  Tape tape;
  EXPECT_EQ(relu(tape.constant(Tensor({2}, {-3, 3}))).value(), Tensor({2}, {0, 3}));
}

TEST(Elementwise, SpatialMapBroadcastEqualsReplication) {
  std::mt19937_64 gen(31);
  const Tensor map = random_tensor({3, 4, 1}, gen);
  const Tensor x = random_tensor({3, 4, 5}, gen);
  Tensor replicated({3, 4, 5});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 5; ++c) replicated.at(i, j, c) = map.at(i, j, 0);
  Tape tape;
  EXPECT_EQ(mul(tape.constant(map), tape.constant(x)).value(), mul(tape.constant(replicated), tape.constant(x)).value());
  EXPECT_EQ(add(tape.constant(x), tape.constant(map)).value(), add(tape.constant(x), tape.constant(replicated)).value());
}

TEST(Elementwise, ChannelVectorBroadcast) {
  Tape tape;
  const Tensor x({2, 1, 2}, {1, 2, 3, 4});
  const Tensor gate({1, 1, 2}, {10, 100});
  EXPECT_EQ(mul(tape.constant(x), tape.constant(gate)).value(), Tensor({2, 1, 2}, {10, 200, 30, 400}));
}

TEST(Elementwise, OtherBroadcastsAreRejected) {
  Tape tape;
  Var x = tape.constant(Tensor({3, 4, 5}));
  EXPECT_THROW(add(x, tape.constant(Tensor({3, 1, 5}))), ShapeError);
  EXPECT_THROW(mul(x, tape.constant(Tensor({5}))), ShapeError);
  EXPECT_THROW(add(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3, 2}))), ShapeError);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityAndDot) {
  Tape tape;
  const Tensor b({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(tape.constant(Tensor({2, 2}, {1, 0, 0, 1})), tape.constant(b)).value(), b);
  EXPECT_EQ(matmul(tape.constant(Tensor({1, 2}, {1, 2})), tape.constant(Tensor({2, 1}, {3, 4}))).value(),
            Tensor({1, 1}, {11}));
}

TEST(Matmul, MatchesReference) {
  std::mt19937_64 gen(41);
  const Tensor a = random_tensor({4, 5}, gen);
  const Tensor b = random_tensor({5, 3}, gen);
  Tape tape;
  EXPECT_LT(max_abs_diff(matmul(tape.constant(a), tape.constant(b)).value(), testing_support::matmul_reference(a, b)),
            1e-12);
}

TEST(Matmul, InnerMismatchIsRejected) {
  Tape tape;
  EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 gen(51);
  Parameter p("p", random_tensor({3, 2}, gen));
  Tape tape;
  tape.backward(sum(tape.parameter(p)));
  EXPECT_EQ(p.grad, Tensor({3, 2}, 1.0));
}

TEST(Backward, SquareGivesTwiceValue) {
  std::mt19937_64 gen(52);
  Parameter p("p", random_tensor({4}, gen));
  Tape tape;
  Var v = tape.parameter(p);
  tape.backward(sum(mul(v, v)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.grad[i], 2.0 * p.value[i]);
}

TEST(Backward, NonScalarLossIsRejected) {
  Parameter p("p", Tensor({3}, 1.0));
  Tape tape;
  EXPECT_THROW(tape.backward(tape.parameter(p)), ContractViolation);
}

TEST(Backward, VisitsEveryOperatorOnceNewestFirst) {
  Parameter p("p", Tensor({1}, 1.0));
  Tape tape;
  std::vector<int> visits;
  Var x = tape.parameter(p);
  auto op = [&](Var in, int id) {
    const std::size_t parent = in.index();
    return tape.record(in.value(), {in}, [&visits, id, parent](Tape& t, std::size_t self) {
      visits.push_back(id);
      t.grad(parent)[0] += t.grad(self)[0];
    });
  };
  Var a = op(x, 1);
  Var b = op(a, 2);
  Var c = op(b, 3);
  tape.backward(c);
  EXPECT_EQ(visits, (std::vector<int>{3, 2, 1}));
  EXPECT_EQ(p.grad[0], 1.0);
}

TEST(Backward, ParameterUsedTwiceAccumulates) {
  Parameter p("p", Tensor({2}, {1.0, -2.0}));
  Tape tape;
  Var a = tape.parameter(p);
  Var b = tape.parameter(p);
  EXPECT_EQ(a.index(), b.index());
  tape.backward(sum(add(mul(a, b), a)));
  EXPECT_EQ(p.grad, Tensor({2}, {3.0, -3.0}));
}

TEST(Backward, RepeatedRunsAreBitwiseIdentical) {
  ModelConfig cfg = ModelConfig::desk(Variant::ssam);
  cfg.backbone.input_size = 16;
  ForceModel model(cfg);
  initialize(model.params(), 3);
  std::mt19937_64 gen(53);
  const Tensor f0 = random_tensor({16, 16, 1}, gen, 0.0, 1.0);
  const Tensor f1 = random_tensor({16, 16, 1}, gen, 0.0, 1.0);
  auto run = [&] {
    model.params().zero_grad();
    Tape tape;
    const Var maps[] = {model.features(tape, f0), model.features(tape, f1)};
    Var loss = sum(model.encode(tape, maps));
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (auto& [id, p] : model.params()) grads.push_back(p.grad);
    return std::make_pair(loss.value().item(), grads);
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

TEST(GradCheck, QuadraticIsNearlyExact) {
  Parameter theta("theta", Tensor({1}, {3.0}));
  auto f = [&](Tape& t) {
    Var v = t.parameter(theta);
    return sum(mul(v, v));
  };
  const auto r = grad_check(f, {&theta}, 1e-5);
  EXPECT_TRUE(r.finite);
  EXPECT_LT(r.max_relative_error, 1e-8);
  EXPECT_EQ(r.checked, 1u);
}

TEST(GradCheck, SigmoidLayer) {
  std::mt19937_64 gen(61);
  Parameter w("w", random_tensor({3, 4}, gen));
  Parameter b("b", random_tensor({3}, gen));
  const Tensor x = random_tensor({2, 4}, gen);
  const Tensor r = random_tensor({2, 3}, gen, 0.5, 1.5);
  auto f = [&](Tape& t) {
    return sum(mul(sigmoid(linear(t.constant(x), t.parameter(w), t.parameter(b))), t.constant(r)));
  };
  EXPECT_LT(grad_check(f, {&w, &b}, 1e-5).max_relative_error, 1e-6);
}

TEST(GradCheck, ChannelAttentionBlock) {
  std::mt19937_64 gen(62);
  ParameterSet params;
  ChannelAttention scam(params, "scam/", 2, 8, 4, 4, 4);
  for (auto& [id, p] : params) p.value = random_tensor(p.value.shape(), gen, -0.5, 0.5);
  Parameter& prev = params.add("x/prev", random_tensor({4, 4, 8}, gen, 0.0, 1.0));
  Parameter& cur = params.add("x/cur", random_tensor({4, 4, 8}, gen, 0.0, 1.0));
  const Tensor r = random_tensor({4, 4, 8}, gen, 0.5, 1.5);
  auto f = [&](Tape& t) {
    const Var maps[] = {t.parameter(prev), t.parameter(cur)};
    return sum(mul(scam.refine(t, maps), t.constant(r)));
  };
  const auto res = grad_check(f, params, 1e-5);
  EXPECT_TRUE(res.finite);
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_parameter;
}

TEST(GradCheck, BackboneWithSpatialAttention) {
  ModelConfig cfg = ModelConfig::desk(Variant::ssam);
  cfg.backbone.input_size = 16;
  cfg.backbone.channels = {2, 2, 2, 2, 3, 3, 3, 3, 4, 4};
  ForceModel model(cfg);
  initialize(model.params(), 5);
  std::mt19937_64 gen(63);
  // biases away from zero keep ReLU inputs clear of the kink
  for (auto& [id, p] : model.params()) {
    if (p.init == Init::zero) p.value = random_tensor(p.value.shape(), gen, 0.05, 0.2);
  }
  const Tensor f0 = random_tensor({16, 16, 1}, gen, 0.0, 1.0);
  const Tensor f1 = random_tensor({16, 16, 1}, gen, 0.0, 1.0);
  const Tensor r = random_tensor({4}, gen, 0.5, 1.5);
  std::vector<Parameter*> checked;
  for (auto& [id, p] : model.params()) {
    if (id.rfind("backbone/", 0) == 0 || id.rfind("attention/", 0) == 0) checked.push_back(&p);
  }
  auto f = [&](Tape& t) {
    const Var maps[] = {model.features(t, f0), model.features(t, f1)};
    return sum(mul(model.encode(t, maps), t.constant(r)));
  };
  const auto res = grad_check(f, checked, 1e-5);
  EXPECT_TRUE(res.finite) << res.failure;
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_parameter << "[" << res.worst_index << "]";
}

TEST(GradCheck, NonFiniteValueNamesParameter) {
  Parameter good("good", Tensor({1}, {1.0}));
  Parameter bad("bad", Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}));
  auto f = [&](Tape& t) { return sum(add(t.parameter(good), t.parameter(bad))); };
  const auto r = grad_check(f, {&good, &bad}, 1e-5);
  EXPECT_FALSE(r.finite);
  EXPECT_FALSE(r.passed(1e-4));
  EXPECT_NE(r.failure.find("good"), std::string::npos);
}

TEST(GradCheck, EpsilonOutsideRangeIsRejected) {
  Parameter p("p", Tensor({1}, {1.0}));
  auto f = [&](Tape& t) { return sum(t.parameter(p)); };
  EXPECT_THROW(grad_check(f, {&p}, 1e-2), ContractViolation);
  EXPECT_THROW(grad_check(f, {&p}, 1e-9), ContractViolation);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  ForceModel model(ModelConfig::desk(Variant::scam));
  initialize(model.params(), 9);
  model.params().at("temporal/head/regressor/b").value[0] = -0.0;
  const std::string bytes = encode_checkpoint(snapshot(model.params(), "{\"note\":1}"));
  const Checkpoint decoded = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(decoded), bytes);
  EXPECT_EQ(decoded.metadata, "{\"note\":1}");

  ForceModel other(ModelConfig::desk(Variant::scam));
  restore(decoded, other.params());
  for (auto& [id, p] : model.params()) {
    const auto& q = other.params().at(id).value;
    ASSERT_EQ(p.value.size(), q.size());
    for (std::size_t i = 0; i < q.size(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(p.value[i]), std::bit_cast<std::uint64_t>(q[i])) << id;
    }
  }

  const auto dir = testing_support::scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", decoded);
  save_checkpoint(dir / "b.ckpt", load_checkpoint(dir / "a.ckpt"));
  EXPECT_EQ(encode_checkpoint(load_checkpoint(dir / "b.ckpt")), bytes);
}

TEST(Checkpoint, CorruptInputIsReported) {
  ForceModel model(ModelConfig::desk());
  const std::string bytes = encode_checkpoint(snapshot(model.params()));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), IoError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
}

TEST(Checkpoint, ArchitectureMismatchNamesParameter) {
  ForceModel baseline(ModelConfig::desk(Variant::baseline));
  ForceModel ssam(ModelConfig::desk(Variant::ssam));
  const Checkpoint ckpt = snapshot(baseline.params());
  try {
    restore(ckpt, ssam.params());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("attention/ssam/"), std::string::npos) << e.what();
  }
}
