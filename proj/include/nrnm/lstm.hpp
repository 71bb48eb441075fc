#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/rng.hpp"

namespace nrnm {

// Weights are laid out for row-vector inputs: gate = x W + h U + b.
struct LstmLayerParams {
  Parameter* W_i = nullptr;  // [d_in, d_h]
  Parameter* W_f = nullptr;
  Parameter* W_o = nullptr;
  Parameter* W_c = nullptr;
  Parameter* U_i = nullptr;  // [d_h, d_h]
  Parameter* U_f = nullptr;
  Parameter* U_o = nullptr;
  Parameter* U_c = nullptr;
  Parameter* b_i = nullptr;  // [d_h]
  Parameter* b_f = nullptr;
  Parameter* b_o = nullptr;
  Parameter* b_c = nullptr;

  std::size_t input_size() const { return W_i->value.dim(0); }
  std::size_t hidden_size() const { return U_i->value.dim(0); }

  // Registers "<prefix>.W_i" ... "<prefix>.b_c". Weights are uniform in
  // [-1/sqrt(d_h), 1/sqrt(d_h)], the forget bias starts at +1 and the other
  // biases at 0.
  static LstmLayerParams create(ParameterStore& store, const std::string& prefix, std::size_t d_in,
                                std::size_t d_h, Rng& rng);
};

struct LstmLayerState {
  Var h;  // [B, d_h]
  Var c;  // [B, d_h]
  std::size_t t = 0;
};

LstmLayerState initial_lstm_state(Graph& g, std::size_t batch, std::size_t d_h);

// One LSTM update. mem_contrib, when given, is added to the new cell state
// after the usual forget/input terms.
LstmLayerState lstm_step(Graph& g, const LstmLayerParams& p, const LstmLayerState& state, Var x,
                         std::optional<Var> mem_contrib = std::nullopt);

// Per-layer callbacks used by the stacked rollout. contribution() is asked
// for the extra cell-state term before step t; after_step() sees the hidden
// states of that layer for steps 0..t once step t is done.
class LayerHook {
 public:
  virtual ~LayerHook() = default;
  virtual std::optional<Var> contribution(std::size_t layer, std::size_t t) = 0;
  virtual void after_step(std::size_t /*layer*/, std::size_t /*t*/, std::span<const Var> /*hidden*/) {}
};

struct StackOptions {
  LayerHook* hook = nullptr;
  // Per-sequence valid lengths. Past its length a row keeps its state.
  std::span<const std::size_t> lengths;
  // Applied to every hidden state handed to the next layer (not the top one).
  std::function<Var(Var)> between_layers;
};

// hidden[l][t] is the [B, d_h] hidden state of layer l after step t.
struct StackOutput {
  std::vector<std::vector<Var>> hidden;
};

StackOutput stack_forward(Graph& g, std::span<const LstmLayerParams> layers, std::span<const Var> inputs,
                          const StackOptions& options = {});

// Fixed injections: step -> (layer, contribution). A layer outside the stack
// is a ConfigError.
using InjectionMap = std::map<std::size_t, std::pair<std::size_t, Var>>;

StackOutput stack_forward(Graph& g, std::span<const LstmLayerParams> layers, std::span<const Var> inputs,
                          const InjectionMap& injections);

// Row mask for step t: row b is live when t < lengths[b]. Empty when every
// row is live (or no lengths were given).
std::vector<char> live_rows(std::span<const std::size_t> lengths, std::size_t t);

}  // namespace nrnm
