#include "nrnm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Lstm: return "lstm";
    case ModelKind::Rnn: return "rnn";
    case ModelKind::Gru: return "gru";
    case ModelKind::HighOrder: return "horder";
    case ModelKind::Nrnm: return "nrnm";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  for (ModelKind k : {ModelKind::Lstm, ModelKind::Rnn, ModelKind::Gru, ModelKind::HighOrder, ModelKind::Nrnm}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("model", "unknown model '" + name + "' (lstm, rnn, gru, horder, nrnm)");
}

std::size_t ModelConfig::hidden_at(std::size_t layer) const {
  if (hidden.size() == 1) return hidden[0];
  return hidden.at(layer);
}

std::vector<std::size_t> ModelConfig::inject_layers() const {
  if (kind != ModelKind::Nrnm) return {};
  std::vector<std::size_t> layers{nrnm.inject_layer};
  for (std::size_t l : extra_inject_layers)
    if (std::find(layers.begin(), layers.end(), l) == layers.end()) layers.push_back(l);
  return layers;
}

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("depth", "need at least one layer");
  if (hidden.empty() || (hidden.size() != 1 && hidden.size() != depth)) {
    throw ConfigError("hidden", fmt::format("give one width or {} widths, got {}", depth, hidden.size()));
  }
  for (std::size_t h : hidden)
    if (h < 1) throw ConfigError("hidden", "widths must be positive");
  if (input_dim < 1) throw ConfigError("input_dim", "input dimension must be positive");
  if (classes < 2) throw ConfigError("classes", fmt::format("need at least 2 classes, got {}", classes));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout", "rate must lie in [0, 1)");
  if (kind == ModelKind::HighOrder && order < 1) throw ConfigError("order", "order must be at least 1");
  if (kind == ModelKind::Nrnm) {
    nrnm.validate();
    for (std::size_t l : inject_layers()) {
      if (l >= depth) {
        throw ConfigError("inject_layer", fmt::format("layer {} does not exist in a depth-{} stack", l, depth));
      }
      if (hidden_at(l) != nrnm.m) {
        throw ConfigError("m", fmt::format("memory size {} must equal the width {} of layer {}", nrnm.m,
                                           hidden_at(l), l));
      }
    }
  }
}

SequenceModel::SequenceModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(mix_seed(cfg_.seed, 0x6d6f64656cULL));
  std::size_t d_in = cfg_.input_dim;
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::size_t d_h = cfg_.hidden_at(l);
    switch (cfg_.kind) {
      case ModelKind::Lstm:
      case ModelKind::Nrnm:
        lstm_.push_back(LstmLayerParams::create(params_, fmt::format("lstm.layer{}", l), d_in, d_h, rng));
        break;
      case ModelKind::Rnn:
        baseline_.push_back(BaselineLayerParams::create(params_, fmt::format("rnn.layer{}", l),
                                                        BaselineKind::VanillaRnn, d_in, d_h, 1, rng));
        break;
      case ModelKind::Gru:
        baseline_.push_back(BaselineLayerParams::create(params_, fmt::format("gru.layer{}", l), BaselineKind::Gru,
                                                        d_in, d_h, 1, rng));
        break;
      case ModelKind::HighOrder:
        baseline_.push_back(BaselineLayerParams::create(params_, fmt::format("horder.layer{}", l),
                                                        BaselineKind::HighOrderRnn, d_in, d_h, cfg_.order, rng));
        break;
    }
    d_in = d_h;
  }
  // Separate streams so the backbone and head match an LSTM of the same seed.
  Rng cell_rng(mix_seed(cfg_.seed, 0x6e726e6dULL));
  for (std::size_t l : cfg_.inject_layers()) {
    NrnmConfig cell = cfg_.nrnm;
    cell.inject_layer = l;
    const std::string prefix = l == cfg_.nrnm.inject_layer ? "nrnm" : fmt::format("nrnm.layer{}", l);
    cells_.emplace_back(l, NrnmParams::create(params_, prefix, cell, cfg_.input_dim, cfg_.hidden_at(l), cell_rng));
  }
  const std::size_t top = cfg_.hidden_at(cfg_.depth - 1);
  const double bound = 1.0 / std::sqrt(static_cast<double>(top));
  Rng head_rng(mix_seed(cfg_.seed, 0x68656164ULL));
  Tensor w({top, cfg_.classes});
  for (double& v : w.storage()) v = head_rng.uniform(-bound, bound);
  head_W_ = &params_.add("head.W", std::move(w));
  head_b_ = &params_.add("head.b", Tensor({cfg_.classes}));
  params_.quantize(cfg_.precision);
}

ForwardResult SequenceModel::forward(Graph& g, const SequenceBatch& batch, const ForwardOptions& options) {
  batch.validate(cfg_.classes);
  if (batch.features() != cfg_.input_dim) {
    throw DimensionError(fmt::format("batch has {} features, model expects {}", batch.features(), cfg_.input_dim));
  }
  const std::size_t T = batch.steps();
  std::vector<Var> inputs;
  inputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) inputs.push_back(g.constant(batch.step(t)));

  StackOptions so;
  so.lengths = batch.lengths;
  const bool drop = options.training && cfg_.dropout > 0.0;
  if (drop) {
    if (!options.dropout_rng) throw UsageError("training forward with dropout needs an rng");
    Rng* rng = options.dropout_rng;
    const double keep = 1.0 - cfg_.dropout;
    so.between_layers = [rng, keep](Var h) {
      Tensor mask(h.shape());
      for (double& v : mask.storage()) v = rng->uniform() < keep ? 1.0 / keep : 0.0;
      return mul_const(h, mask);
    };
  }

  std::vector<std::unique_ptr<NrnmRunner>> runners;
  HookSet hooks;
  for (const auto& [layer, params] : cells_) {
    NrnmConfig cell = cfg_.nrnm;
    cell.inject_layer = layer;
    runners.push_back(std::make_unique<NrnmRunner>(g, cell, params, inputs, options.traces));
    runners.back()->suppress_contribution(options.suppress_memory);
    hooks.add(layer, runners.back().get());
  }
  if (!runners.empty()) so.hook = &hooks;

  ForwardResult out;
  out.stack = lstm_.empty() ? baseline_stack_forward(g, baseline_, inputs, so) : stack_forward(g, lstm_, inputs, so);
  for (const auto& r : runners) out.memory_updates += r->updates();

  // Finished rows are frozen by the stack, so the last step holds every
  // sequence's own final hidden state.
  Var last = out.stack.hidden.back().back();
  out.logits = add_bias(matmul(last, g.param(*head_W_)), g.param(*head_b_));
  out.probs = softmax(out.logits.value());
  return out;
}

Var nll_loss(Var logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

Tensor softmax(const Tensor& logits) {
  Tensor out(logits.shape());
  const std::size_t R = logits.rows(), C = logits.cols();
  for (std::size_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += out.at(r, c) = std::exp(logits.at(r, c) - mx);
    for (std::size_t c = 0; c < C; ++c) out.at(r, c) /= total;
  }
  return out;
}

std::vector<int> predict(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(SequenceModel& model, const SequenceBatch& batch) {
  Graph g(model.config().precision, false);
  return predict(model.forward(g, batch).logits.value());
}

std::size_t parameter_count(const ModelConfig& cfg) { return SequenceModel(cfg).params().scalar_count(); }

std::size_t match_hidden_width(ModelConfig cfg, std::size_t target, std::size_t max_width) {
  const std::size_t step = cfg.kind == ModelKind::Nrnm ? cfg.nrnm.heads : 1;
  std::size_t best = step;
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  for (std::size_t w = step; w <= max_width; w += step) {
    cfg.hidden = {w};
    if (cfg.kind == ModelKind::Nrnm) cfg.nrnm.m = w;
    const std::size_t n = parameter_count(cfg);
    const std::size_t gap = n > target ? n - target : target - n;
    if (gap < best_gap) {
      best = w;
      best_gap = gap;
    }
    if (n > target) break;
  }
  return best;
}

}  // namespace nrnm
