#include "nrnm/lstm.hpp"

#include <cmath>

#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

Var gate_pre(Graph& g, Var x, Var h, Parameter* W, Parameter* U, Parameter* b) {
  return add_bias(add(matmul(x, g.param(*W)), matmul(h, g.param(*U))), g.param(*b));
}

}  // namespace

LstmLayerParams LstmLayerParams::create(ParameterStore& store, const std::string& prefix, std::size_t d_in,
                                        std::size_t d_h, Rng& rng) {
  const double r = 1.0 / std::sqrt(static_cast<double>(d_h));
  LstmLayerParams p;
  p.W_i = &store.add(prefix + ".W_i", uniform_tensor({d_in, d_h}, r, rng));
  p.W_f = &store.add(prefix + ".W_f", uniform_tensor({d_in, d_h}, r, rng));
  p.W_o = &store.add(prefix + ".W_o", uniform_tensor({d_in, d_h}, r, rng));
  p.W_c = &store.add(prefix + ".W_c", uniform_tensor({d_in, d_h}, r, rng));
  p.U_i = &store.add(prefix + ".U_i", uniform_tensor({d_h, d_h}, r, rng));
  p.U_f = &store.add(prefix + ".U_f", uniform_tensor({d_h, d_h}, r, rng));
  p.U_o = &store.add(prefix + ".U_o", uniform_tensor({d_h, d_h}, r, rng));
  p.U_c = &store.add(prefix + ".U_c", uniform_tensor({d_h, d_h}, r, rng));
  p.b_i = &store.add(prefix + ".b_i", Tensor({d_h}, 0.0));
  p.b_f = &store.add(prefix + ".b_f", Tensor({d_h}, 1.0));
  p.b_o = &store.add(prefix + ".b_o", Tensor({d_h}, 0.0));
  p.b_c = &store.add(prefix + ".b_c", Tensor({d_h}, 0.0));
  return p;
}

LstmLayerState initial_lstm_state(Graph& g, std::size_t batch, std::size_t d_h) {
  Var zero = g.constant(Tensor({batch, d_h}));
  return {zero, zero, 0};
}

LstmLayerState lstm_step(Graph& g, const LstmLayerParams& p, const LstmLayerState& state, Var x,
                         std::optional<Var> mem_contrib) {
  const std::size_t d_h = p.hidden_size();
  if (x.value().rank() != 2 || x.shape()[1] != p.input_size()) {
    throw DimensionError(fmt::format("lstm_step: input {} does not match W_i {}", to_string(x.shape()),
                                     to_string(p.W_i->value.shape())));
  }
  if (state.h.shape() != Shape{x.shape()[0], d_h} || state.c.shape() != state.h.shape()) {
    throw DimensionError(fmt::format("lstm_step: state h {} / c {} for batch {} and d_h {}",
                                     to_string(state.h.shape()), to_string(state.c.shape()), x.shape()[0], d_h));
  }
  Var gi = sigmoid(gate_pre(g, x, state.h, p.W_i, p.U_i, p.b_i));
  Var gf = sigmoid(gate_pre(g, x, state.h, p.W_f, p.U_f, p.b_f));
  Var go = sigmoid(gate_pre(g, x, state.h, p.W_o, p.U_o, p.b_o));
  Var candidate = tanh(gate_pre(g, x, state.h, p.W_c, p.U_c, p.b_c));

  Var c = add(mul(gf, state.c), mul(gi, candidate));
  if (mem_contrib) {
    if (mem_contrib->shape() != c.shape()) throw_shape_mismatch("lstm_step memory", c.shape(), mem_contrib->shape());
    c = add(c, *mem_contrib);
  }
  Var h = mul(go, tanh(c));
  return {h, c, state.t + 1};
}

std::vector<char> live_rows(std::span<const std::size_t> lengths, std::size_t t) {
  std::vector<char> keep(lengths.size());
  bool all = true;
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    keep[b] = t < lengths[b];
    all = all && keep[b];
  }
  if (all) keep.clear();
  return keep;
}

StackOutput stack_forward(Graph& g, std::span<const LstmLayerParams> layers, std::span<const Var> inputs,
                          const StackOptions& options) {
  StackOutput out;
  out.hidden.resize(layers.size());
  if (inputs.empty()) return out;
  const std::size_t batch = inputs[0].shape()[0];
  const std::size_t steps = inputs.size();
  if (!options.lengths.empty() && options.lengths.size() != batch) {
    throw DimensionError(fmt::format("stack_forward: {} lengths for batch {}", options.lengths.size(), batch));
  }

  std::vector<Var> layer_in(inputs.begin(), inputs.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && layers[l].input_size() != layers[l - 1].hidden_size()) {
      throw DimensionError(fmt::format("stack_forward: layer {} expects input {} but layer {} emits {}", l,
                                       layers[l].input_size(), l - 1, layers[l - 1].hidden_size()));
    }
    auto& hidden = out.hidden[l];
    hidden.reserve(steps);
    LstmLayerState state = initial_lstm_state(g, batch, layers[l].hidden_size());
    for (std::size_t t = 0; t < steps; ++t) {
      std::optional<Var> contrib = options.hook ? options.hook->contribution(l, t) : std::nullopt;
      LstmLayerState next = lstm_step(g, layers[l], state, layer_in[t], contrib);
      const std::vector<char> keep = live_rows(options.lengths, t);
      if (!keep.empty()) {
        next.h = select_rows(next.h, state.h, keep);
        next.c = select_rows(next.c, state.c, keep);
      }
      state = next;
      hidden.push_back(state.h);
      if (options.hook) options.hook->after_step(l, t, hidden);
    }
    if (l + 1 < layers.size()) {
      for (std::size_t t = 0; t < steps; ++t) {
        layer_in[t] = options.between_layers ? options.between_layers(hidden[t]) : hidden[t];
      }
    }
  }
  return out;
}

namespace {

class FixedInjections : public LayerHook {
 public:
  explicit FixedInjections(const InjectionMap& m) : map_(m) {}

  std::optional<Var> contribution(std::size_t layer, std::size_t t) override {
    auto it = map_.find(t);
    if (it == map_.end() || it->second.first != layer) return std::nullopt;
    return it->second.second;
  }

 private:
  const InjectionMap& map_;
};

}  // namespace

StackOutput stack_forward(Graph& g, std::span<const LstmLayerParams> layers, std::span<const Var> inputs,
                          const InjectionMap& injections) {
  for (const auto& [step, target] : injections) {
    if (target.first >= layers.size()) {
      throw ConfigError("injection", fmt::format("step {} names layer {} but the stack has depth {}", step,
                                                 target.first, layers.size()));
    }
  }
  FixedInjections hook(injections);
  StackOptions options;
  options.hook = &hook;
  return stack_forward(g, layers, inputs, options);
}

}  // namespace nrnm
