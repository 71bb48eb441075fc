#pragma once

// Reference recurrent layers for comparison runs: Elman RNN, GRU and an
// additive high-order RNN h_t = tanh(x W + sum_{j=1..n} h_{t-j} U_j + b).

#include <cstddef>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/lstm.hpp"
#include "nrnm/rng.hpp"

namespace nrnm {

enum class BaselineKind { VanillaRnn, Gru, HighOrderRnn };

const char* to_string(BaselineKind kind);

struct BaselineLayerParams {
  BaselineKind kind = BaselineKind::VanillaRnn;
  // Vanilla / high-order: W [d_in, d_h], U[j] [d_h, d_h] for lag j+1, b [d_h].
  Parameter* W = nullptr;
  std::vector<Parameter*> U;
  Parameter* b = nullptr;
  // GRU: update (z), reset (r) and candidate (n) gates.
  Parameter* W_z = nullptr;
  Parameter* W_r = nullptr;
  Parameter* W_n = nullptr;
  Parameter* U_z = nullptr;
  Parameter* U_r = nullptr;
  Parameter* U_n = nullptr;
  Parameter* b_z = nullptr;
  Parameter* b_r = nullptr;
  Parameter* b_n = nullptr;

  std::size_t order() const { return kind == BaselineKind::Gru ? 1 : U.size(); }
  std::size_t input_size() const;
  std::size_t hidden_size() const;

  // order is only read for HighOrderRnn and must be >= 1 (1 is the vanilla
  // recurrence). Weights uniform in [-1/sqrt(d_h), 1/sqrt(d_h)], biases 0.
  static BaselineLayerParams create(ParameterStore& store, const std::string& prefix, BaselineKind kind,
                                    std::size_t d_in, std::size_t d_h, std::size_t order, Rng& rng);
};

// Most recent hidden state first; zero-padded to the layer order.
using HiddenHistory = std::deque<Var>;

HiddenHistory initial_history(Graph& g, const BaselineLayerParams& p, std::size_t batch);

Var baseline_step(Graph& g, const BaselineLayerParams& p, const HiddenHistory& history, Var x);

// Stacked rollout with the same masking and between-layer contract as the
// LSTM stack (hooks are not consulted).
StackOutput baseline_stack_forward(Graph& g, std::span<const BaselineLayerParams> layers,
                                   std::span<const Var> inputs, const StackOptions& options = {});

}  // namespace nrnm
