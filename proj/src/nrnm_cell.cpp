#include "nrnm/nrnm_cell.hpp"

#include <array>
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

double fan_in_bound(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

// Reruns a stage, prefixing any numeric failure with the stage name.
template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(fmt::format("memory_embedding/{}: {}", name, e.what()));
  }
}

}  // namespace

void NrnmConfig::validate() const {
  if (k < 1) throw ConfigError("k", "block size must be at least 1");
  if (s < 1 || s > k) throw ConfigError("s", fmt::format("stride must lie in [1, k={}], got {}", k, s));
  if (win < 1) throw ConfigError("win", "sliding window must be at least 1");
  if (m < 1) throw ConfigError("m", "memory size must be at least 1");
  if (heads < 1 || m % heads != 0) {
    throw ConfigError("heads", fmt::format("memory size {} is not divisible by {} heads", m, heads));
  }
}

NrnmParams NrnmParams::create(ParameterStore& store, const std::string& prefix, const NrnmConfig& cfg,
                              std::size_t input_dim, std::size_t d_h, Rng& rng) {
  cfg.validate();
  if (d_h != cfg.m) {
    throw ConfigError("m", fmt::format("memory size {} must equal the host layer width {}", cfg.m, d_h));
  }
  const std::size_t m = cfg.m, u = cfg.units(), D = input_dim;
  const std::size_t gate_in = u * D + u * m, flat = u * m;
  NrnmParams p;
  p.P_x = &store.add(prefix + ".P_x", uniform_tensor({D, m}, fan_in_bound(D), rng));
  p.W_q = &store.add(prefix + ".W_q", uniform_tensor({m, m}, fan_in_bound(m), rng));
  p.W_k = &store.add(prefix + ".W_k", uniform_tensor({m, m}, fan_in_bound(m), rng));
  p.W_v = &store.add(prefix + ".W_v", uniform_tensor({m, m}, fan_in_bound(m), rng));
  p.W_o = &store.add(prefix + ".W_o", uniform_tensor({m, m}, fan_in_bound(m), rng));
  p.W_fc = &store.add(prefix + ".W_fc", uniform_tensor({m, m}, fan_in_bound(m), rng));
  p.b_fc = &store.add(prefix + ".b_fc", Tensor({m}, 0.0));
  p.W_im = &store.add(prefix + ".W_im", uniform_tensor({gate_in, flat}, fan_in_bound(gate_in), rng));
  p.W_fm = &store.add(prefix + ".W_fm", uniform_tensor({gate_in, flat}, fan_in_bound(gate_in), rng));
  p.B_im = &store.add(prefix + ".B_im", Tensor({flat}, 0.0));
  p.B_fm = &store.add(prefix + ".B_fm", Tensor({flat}, 1.0));  // same forget bias as the LSTM
  p.W_m = &store.add(prefix + ".W_m", uniform_tensor({D, d_h}, fan_in_bound(D), rng));
  p.U_m = &store.add(prefix + ".U_m", uniform_tensor({flat, d_h}, fan_in_bound(flat), rng));
  p.b_m = &store.add(prefix + ".b_m", Tensor({d_h}, 0.0));
  p.V_m = &store.add(prefix + ".V_m", uniform_tensor({flat, d_h}, fan_in_bound(flat), rng));
  return p;
}

MemoryState initial_memory(Graph& g, std::size_t batch, const NrnmConfig& cfg) {
  return {g.constant(Tensor({batch, cfg.units() * cfg.m})), 0, false};
}

std::optional<std::vector<std::size_t>> block_steps(std::size_t t, const NrnmConfig& cfg) {
  if (t + 1 < cfg.k) return std::nullopt;
  std::vector<std::size_t> steps;
  steps.reserve(cfg.units());
  for (std::size_t step = t + 1 - cfg.k; step <= t; step += cfg.s) steps.push_back(step);
  return steps;
}

std::optional<Var> assemble_block(Graph& g, std::span<const Var> hidden, std::span<const Var> inputs,
                                  std::size_t t, const NrnmConfig& cfg, const NrnmParams& p) {
  auto steps = block_steps(t, cfg);
  if (!steps) return std::nullopt;
  if (t >= hidden.size() || t >= inputs.size()) {
    throw DimensionError(fmt::format("assemble_block: step {} beyond {} hidden / {} input steps", t,
                                     hidden.size(), inputs.size()));
  }
  Var proj = g.param(*p.P_x);
  std::vector<Var> units;
  units.reserve(2 * steps->size());
  for (std::size_t step : *steps) units.push_back(hidden[step]);
  for (std::size_t step : *steps) units.push_back(matmul(inputs[step], proj));
  for (const Var& unit : units) {
    if (unit.shape() != units[0].shape() || unit.shape()[1] != cfg.m) {
      throw DimensionError(fmt::format("assemble_block: unit {} does not match memory size {}",
                                       to_string(unit.shape()), cfg.m));
    }
  }
  return interleave_rows(units);
}

MemoryEmbedding memory_embedding(Var block, const NrnmParams& p, const NrnmConfig& cfg) {
  Graph& g = block.graph();
  const std::size_t u = cfg.units(), source = 2 * u, m = cfg.m;
  if (block.value().rank() != 2 || block.shape()[1] != m || block.shape()[0] % source != 0) {
    throw DimensionError(fmt::format("memory_embedding: block {} is not [B*{}, {}]", to_string(block.shape()),
                                     source, m));
  }
  const std::size_t batch = block.shape()[0] / source;
  const double denom = cfg.scale == AttentionScale::FullWidth ? static_cast<double>(m)
                                                                : static_cast<double>(m / cfg.heads);
  const double logit_scale = 1.0 / std::sqrt(denom);

  auto attn = stage("attention", [&] {
    Var q = matmul(block, g.param(*p.W_q));
    Var k = matmul(block, g.param(*p.W_k));
    Var v = matmul(block, g.param(*p.W_v));
    return block_attention(q, k, v, source, cfg.heads, logit_scale);
  });
  Var mixed = stage("skip1", [&] { return add(block, matmul(attn.out, g.param(*p.W_o))); });
  Var refined = stage("skip2", [&] {
    return add(mixed, tanh(add_bias(matmul(mixed, g.param(*p.W_fc)), g.param(*p.b_fc))));
  });
  Var kept = stage("select", [&] { return reshape(block_rows(refined, source, 0, u), {batch, u * m}); });
  return {kept, attn.weights};
}

MemoryState update_memory(Graph& g, Var embedding, const MemoryState& prev, Var block_inputs,
                          const NrnmParams& p, std::size_t block_end) {
  if (embedding.shape() != prev.M.shape()) throw_shape_mismatch("update_memory", embedding.shape(), prev.M.shape());
  if (block_inputs.value().rank() != 2 || block_inputs.shape()[0] != embedding.shape()[0]) {
    throw_shape_mismatch("update_memory inputs", block_inputs.shape(), embedding.shape());
  }
  const std::array<Var, 2> parts{block_inputs, prev.M};
  Var gate_in = concat_cols(parts);
  if (gate_in.shape()[1] != p.W_im->value.dim(0)) {
    throw_shape_mismatch("update_memory gates", gate_in.shape(), p.W_im->value.shape());
  }
  Var input_gate = sigmoid(add_bias(matmul(gate_in, g.param(*p.W_im)), g.param(*p.B_im)));
  Var forget_gate = sigmoid(add_bias(matmul(gate_in, g.param(*p.W_fm)), g.param(*p.B_fm)));
  Var M = add(mul(input_gate, tanh(embedding)), mul(forget_gate, prev.M));
  return {M, block_end, true};
}

MemoryReadout read_memory(Graph& g, const MemoryState& mem, const NrnmParams& p) {
  if (!mem.valid) return {};
  return {matmul(mem.M, g.param(*p.V_m)), matmul(mem.M, g.param(*p.U_m)), true};
}

Var memory_contribution(Graph& g, const MemoryReadout& readout, Var x, const NrnmParams& p) {
  const std::size_t d_h = p.b_m->value.dim(0);
  if (!readout.valid) return g.constant(Tensor({x.shape()[0], d_h}));
  Var gate = sigmoid(add_bias(add(matmul(x, g.param(*p.W_m)), readout.gate_term), g.param(*p.b_m)));
  return mul(gate, readout.projected);
}

Var memory_contribution(Graph& g, const MemoryState& mem, Var x, const NrnmParams& p) {
  return memory_contribution(g, read_memory(g, mem, p), x, p);
}

std::vector<std::size_t> memory_schedule(std::size_t T, const NrnmConfig& cfg) {
  std::vector<std::size_t> ends;
  for (std::size_t e = cfg.k - 1; e < T; e += cfg.win) ends.push_back(e);
  return ends;
}

// ---------------------------------------------------------------------------

NrnmRunner::NrnmRunner(Graph& g, const NrnmConfig& cfg, const NrnmParams& p, std::span<const Var> inputs,
                       std::vector<BlockTrace>* traces)
    : g_(g), cfg_(cfg), p_(p), inputs_(inputs), traces_(traces) {
  if (inputs.empty()) throw DimensionError("NrnmRunner: empty input sequence");
  memory_ = initial_memory(g, inputs[0].shape()[0], cfg);
}

std::optional<Var> NrnmRunner::contribution(std::size_t layer, std::size_t t) {
  if (layer != cfg_.inject_layer || !memory_.valid || suppress_) return std::nullopt;
  if (!readout_.valid) readout_ = read_memory(g_, memory_, p_);
  return memory_contribution(g_, readout_, inputs_[t], p_);
}

void NrnmRunner::after_step(std::size_t layer, std::size_t t, std::span<const Var> hidden) {
  if (layer != cfg_.inject_layer || t + 1 < cfg_.k || (t + 1 - cfg_.k) % cfg_.win != 0) return;
  auto steps = block_steps(t, cfg_);
  auto block = assemble_block(g_, hidden, inputs_, t, cfg_, p_);
  MemoryEmbedding emb = memory_embedding(*block, p_, cfg_);
  std::vector<Var> xs;
  xs.reserve(steps->size());
  for (std::size_t step : *steps) xs.push_back(inputs_[step]);
  Var block_inputs = concat_cols(xs);
  MemoryState next = update_memory(g_, emb.embedding, memory_, block_inputs, p_, t);
  if (traces_) {
    BlockTrace trace;
    trace.step = t;
    trace.layer = layer;
    trace.source_steps = *steps;
    trace.attention = emb.weights;
    trace.memory = next.M.value();
    traces_->push_back(std::move(trace));
  }
  memory_ = next;
  readout_ = {};
  ++updates_;
}

std::optional<Var> HookSet::contribution(std::size_t layer, std::size_t t) {
  for (auto& [l, hook] : hooks_)
    if (l == layer) return hook->contribution(layer, t);
  return std::nullopt;
}

void HookSet::after_step(std::size_t layer, std::size_t t, std::span<const Var> hidden) {
  for (auto& [l, hook] : hooks_)
    if (l == layer) hook->after_step(layer, t, hidden);
}

}  // namespace nrnm
