#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <tuple>
#include <utility>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"
#include "visforce/ops.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

/// Single-direction LSTM over batched inputs (B x input).
///
/// Gate rows of the stacked weights are ordered input, forget, output, candidate:
///   i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
class Lstm {
 public:
  Lstm(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden)
      : input_(input), hidden_(hidden),
        w_input_(params.add(prefix + "w_x", Tensor({4 * hidden, input}), Init::recurrent, hidden)),
        w_hidden_(params.add(prefix + "w_h", Tensor({4 * hidden, hidden}), Init::recurrent, hidden)),
        bias_(params.add(prefix + "b", Tensor({4 * hidden}))) {}

  std::size_t input_size() const { return input_; }
  std::size_t hidden_size() const { return hidden_; }

  /// One recurrence step; x is B x input, h and c are B x hidden. Returns (h', c').
  std::pair<Var, Var> step(Tape& tape, Var x, Var h, Var c) const {
    if (x.shape().size() != 2 || x.shape()[1] != input_) {
      throw ShapeError("lstm step: input " + shape_str(x.shape()) + " does not match input size " +
                       std::to_string(input_));
    }
    const std::size_t batch = x.shape()[0];
    const Shape state{batch, hidden_};
    if (h.shape() != state || c.shape() != state) {
      throw ShapeError("lstm step: state shapes " + shape_str(h.shape()) + ", " + shape_str(c.shape()) +
                       " do not match " + shape_str(state));
    }
    Var gates = add(linear(x, tape.parameter(w_input_), tape.parameter(bias_)), linear(h, tape.parameter(w_hidden_)));
    Var in_gate = sigmoid(slice_last(gates, 0, hidden_));
    Var forget_gate = sigmoid(slice_last(gates, hidden_, hidden_));
    Var out_gate = sigmoid(slice_last(gates, 2 * hidden_, hidden_));
    Var candidate = tanh(slice_last(gates, 3 * hidden_, hidden_));
    Var cell = add(mul(forget_gate, c), mul(in_gate, candidate));
    Var hidden = mul(out_gate, tanh(cell));
    return {hidden, cell};
  }

  /// Runs the sequence (each step B x input) from zero state in the given order; returns the final h.
  Var scan(Tape& tape, std::span<const Var> steps, bool reverse) const {
    if (steps.empty()) throw ContractViolation("lstm scan: empty sequence");
    const std::size_t batch = steps[0].shape()[0];
    Var h = tape.constant(Tensor({batch, hidden_}));
    Var c = tape.constant(Tensor({batch, hidden_}));
    for (std::size_t n = 0; n < steps.size(); ++n) {
      const Var& x = steps[reverse ? steps.size() - 1 - n : n];
      std::tie(h, c) = step(tape, x, h, c);
    }
    return h;
  }

 private:
  std::size_t input_;
  std::size_t hidden_;
  Parameter& w_input_;
  Parameter& w_hidden_;
  Parameter& bias_;
};

/// Bidirectional LSTM whose output is [h_forward after step T, h_backward after step 1] (B x 2H).
class Blstm {
 public:
  Blstm(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t hidden)
      : forward_(params, prefix + "fwd/", input, hidden), backward_(params, prefix + "bwd/", input, hidden) {}

  std::size_t output_size() const { return 2 * forward_.hidden_size(); }

  Var forward(Tape& tape, std::span<const Var> steps) const {
    if (steps.empty()) throw ContractViolation("blstm: empty sequence");
    Var fwd = forward_.scan(tape, steps, false);
    Var bwd = backward_.scan(tape, steps, true);
    return concat_last({fwd, bwd});
  }

  const Lstm& forward_direction() const { return forward_; }
  const Lstm& backward_direction() const { return backward_; }

 private:
  Lstm forward_;
  Lstm backward_;
};

/// Fully connected layer with ReLU followed by a linear regressor to one output.
class RegressionHead {
 public:
  RegressionHead(ParameterSet& params, const std::string& prefix, std::size_t input, std::size_t units)
      : input_(input),
        fc_w_(params.add(prefix + "fc/w", Tensor({units, input}), Init::fan_in, input)),
        fc_b_(params.add(prefix + "fc/b", Tensor({units}))),
        out_w_(params.add(prefix + "regressor/w", Tensor({1, units}), Init::fan_in, units)),
        out_b_(params.add(prefix + "regressor/b", Tensor({1}))) {}

  /// B x input -> B x 1
  Var forward(Tape& tape, Var fused) const {
    if (fused.shape().size() != 2 || fused.shape()[1] != input_) {
      throw ShapeError("regression head expects B x " + std::to_string(input_) + ", got " + shape_str(fused.shape()));
    }
    Var hidden = relu(linear(fused, tape.parameter(fc_w_), tape.parameter(fc_b_)));
    return linear(hidden, tape.parameter(out_w_), tape.parameter(out_b_));
  }

 private:
  std::size_t input_;
  Parameter& fc_w_;
  Parameter& fc_b_;
  Parameter& out_w_;
  Parameter& out_b_;
};

}  // namespace visforce
