#include "nrnm/baselines.hpp"

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

}  // namespace

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::VanillaRnn: return "rnn";
    case BaselineKind::Gru: return "gru";
    case BaselineKind::HighOrderRnn: return "horder";
  }
  return "?";
}

std::size_t BaselineLayerParams::input_size() const {
  return (kind == BaselineKind::Gru ? W_z : W)->value.dim(0);
}

std::size_t BaselineLayerParams::hidden_size() const {
  return (kind == BaselineKind::Gru ? W_z : W)->value.dim(1);
}

BaselineLayerParams BaselineLayerParams::create(ParameterStore& store, const std::string& prefix,
                                                BaselineKind kind, std::size_t d_in, std::size_t d_h,
                                                std::size_t order, Rng& rng) {
  const double r = 1.0 / std::sqrt(static_cast<double>(d_h));
  BaselineLayerParams p;
  p.kind = kind;
  if (kind == BaselineKind::Gru) {
    p.W_z = &store.add(prefix + ".W_z", uniform_tensor({d_in, d_h}, r, rng));
    p.W_r = &store.add(prefix + ".W_r", uniform_tensor({d_in, d_h}, r, rng));
    p.W_n = &store.add(prefix + ".W_n", uniform_tensor({d_in, d_h}, r, rng));
    p.U_z = &store.add(prefix + ".U_z", uniform_tensor({d_h, d_h}, r, rng));
    p.U_r = &store.add(prefix + ".U_r", uniform_tensor({d_h, d_h}, r, rng));
    p.U_n = &store.add(prefix + ".U_n", uniform_tensor({d_h, d_h}, r, rng));
    p.b_z = &store.add(prefix + ".b_z", Tensor({d_h}, 0.0));
    p.b_r = &store.add(prefix + ".b_r", Tensor({d_h}, 0.0));
    p.b_n = &store.add(prefix + ".b_n", Tensor({d_h}, 0.0));
    return p;
  }
  const std::size_t lags = kind == BaselineKind::VanillaRnn ? 1 : order;
  if (lags < 1) throw ConfigError("order", "high-order RNN order must be at least 1");
  p.W = &store.add(prefix + ".W", uniform_tensor({d_in, d_h}, r, rng));
  for (std::size_t j = 1; j <= lags; ++j) {
    p.U.push_back(&store.add(fmt::format("{}.U_{}", prefix, j), uniform_tensor({d_h, d_h}, r, rng)));
  }
  p.b = &store.add(prefix + ".b", Tensor({d_h}, 0.0));
  return p;
}

HiddenHistory initial_history(Graph& g, const BaselineLayerParams& p, std::size_t batch) {
  Var zero = g.constant(Tensor({batch, p.hidden_size()}));
  return HiddenHistory(p.order(), zero);
}

Var baseline_step(Graph& g, const BaselineLayerParams& p, const HiddenHistory& history, Var x) {
  if (x.value().rank() != 2 || x.shape()[1] != p.input_size()) {
    throw DimensionError(fmt::format("baseline_step: input {} for input size {}", to_string(x.shape()),
                                     p.input_size()));
  }
  if (history.size() < p.order()) {
    throw DimensionError(fmt::format("baseline_step: history of {} for order {}", history.size(), p.order()));
  }
  const Shape state_shape{x.shape()[0], p.hidden_size()};
  for (std::size_t j = 0; j < p.order(); ++j) {
    if (history[j].shape() != state_shape) throw_shape_mismatch("baseline_step", history[j].shape(), state_shape);
  }

  if (p.kind == BaselineKind::Gru) {
    const Var& h = history.front();
    Var z = sigmoid(add_bias(add(matmul(x, g.param(*p.W_z)), matmul(h, g.param(*p.U_z))), g.param(*p.b_z)));
    Var r = sigmoid(add_bias(add(matmul(x, g.param(*p.W_r)), matmul(h, g.param(*p.U_r))), g.param(*p.b_r)));
    Var n = tanh(add_bias(add(matmul(x, g.param(*p.W_n)), matmul(mul(r, h), g.param(*p.U_n))), g.param(*p.b_n)));
    // h' = (1 - z) * n + z * h
    return add(mul(affine(z, -1.0, 1.0), n), mul(z, h));
  }

  Var pre = matmul(x, g.param(*p.W));
  for (std::size_t j = 0; j < p.U.size(); ++j) pre = add(pre, matmul(history[j], g.param(*p.U[j])));
  return tanh(add_bias(pre, g.param(*p.b)));
}

StackOutput baseline_stack_forward(Graph& g, std::span<const BaselineLayerParams> layers,
                                   std::span<const Var> inputs, const StackOptions& options) {
  StackOutput out;
  out.hidden.resize(layers.size());
  if (inputs.empty()) return out;
  const std::size_t batch = inputs[0].shape()[0];
  const std::size_t steps = inputs.size();

  std::vector<Var> layer_in(inputs.begin(), inputs.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && layers[l].input_size() != layers[l - 1].hidden_size()) {
      throw DimensionError(fmt::format("baseline_stack_forward: layer {} expects input {} but layer {} emits {}",
                                       l, layers[l].input_size(), l - 1, layers[l - 1].hidden_size()));
    }
    auto& hidden = out.hidden[l];
    hidden.reserve(steps);
    HiddenHistory history = initial_history(g, layers[l], batch);
    for (std::size_t t = 0; t < steps; ++t) {
      Var h = baseline_step(g, layers[l], history, layer_in[t]);
      const std::vector<char> keep = live_rows(options.lengths, t);
      if (!keep.empty()) {
        // A finished row keeps emitting its last hidden state.
        h = select_rows(h, history.front(), keep);
      }
      history.push_front(h);
      history.pop_back();
      hidden.push_back(h);
    }
    if (l + 1 < layers.size()) {
      for (std::size_t t = 0; t < steps; ++t) {
        layer_in[t] = options.between_layers ? options.between_layers(hidden[t]) : hidden[t];
      }
    }
  }
  return out;
}

}  // namespace nrnm
