#include "nrnm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "nrnm/errors.hpp"
#include "nrnm/rng.hpp"

namespace nrnm {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("optimizer", "unknown optimizer '" + name + "' (adam, sgd)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "learning rate must be positive");
  if (!(clip >= 0.0)) throw ConfigError("clip", "clip norm must be positive, or 0 to disable");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps", "must be positive");
  if (batch < 1) throw ConfigError("batch", "batch size must be positive");
  if (eval_every < 1) throw ConfigError("eval_every", "must be at least 1");
}

namespace {

void check_grads(const ParameterStore& params) {
  for (const auto& p : params.all()) {
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient for " + p->name);
  }
}

std::vector<Tensor*> grad_slots(ParameterStore& params) {
  std::vector<Tensor*> out;
  for (const auto& p : params.all()) out.push_back(&p->grad);
  return out;
}

}  // namespace

void adam_step(ParameterStore& params, AdamState& state, const TrainConfig& cfg) {
  check_grads(params);
  const auto& all = params.all();
  if (state.m.empty()) {
    for (const auto& p : all) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != all.size()) throw UsageError("adam state does not match the parameter store");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& value = all[i]->value.storage();
    const auto& grad = all[i]->grad.storage();
    auto& m = state.m[i].storage();
    auto& v = state.v[i].storage();
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
      value[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
    }
  }
}

void sgd_step(ParameterStore& params, const TrainConfig& cfg) {
  check_grads(params);
  for (const auto& p : params.all()) {
    auto& value = p->value.storage();
    const auto& grad = p->grad.storage();
    for (std::size_t j = 0; j < value.size(); ++j) value[j] -= cfg.lr * grad[j];
  }
}

double global_norm(std::span<const Tensor* const> grads) {
  double total = 0.0;
  for (const Tensor* g : grads)
    for (double v : g->storage()) total += v * v;
  return std::sqrt(total);
}

double clip_gradients(std::span<Tensor* const> grads, double max_norm) {
  std::vector<const Tensor*> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor* g : grads)
      for (double& v : g->storage()) v *= factor;
  }
  return norm;
}

double clip_gradients(ParameterStore& params, double max_norm) {
  return clip_gradients(grad_slots(params), max_norm);
}

EvalResult evaluate(SequenceModel& model, std::span<const Sample> samples, std::size_t batch_size) {
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (const SequenceBatch& batch : make_batches(samples, batch_size)) {
    Graph g(model.config().precision, false);
    ForwardResult f = model.forward(g, batch);
    loss_sum += nll_loss(f.logits, batch.labels).value().item() * static_cast<double>(batch.size());
    const auto pred = predict(f.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
    r.count += batch.size();
  }
  if (r.count) {
    r.loss = loss_sum / static_cast<double>(r.count);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  }
  return r;
}

std::string format_metric_row(const MetricRow& row) {
  return fmt::format("{},{},{},{:.17g},{:.17g},{:.3f},{}", row.epoch, row.step, row.split, row.loss, row.accuracy,
                     row.wall_ms, row.seed);
}

TrainResult train(SequenceModel& model, const Dataset& data, const TrainConfig& cfg, const TrainObserver* observer) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("data", "training split is empty");
  ParameterStore& params = model.params();
  const Precision precision = model.config().precision;

  std::ofstream metrics;
  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    metrics.open(cfg.out / "metrics.csv");
    if (!metrics) throw ConfigError("out", "cannot write " + (cfg.out / "metrics.csv").string());
    metrics << kMetricsHeader << '\n' << std::flush;
  }
  const auto start = std::chrono::steady_clock::now();
  auto wall_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };

  TrainResult result;
  auto emit = [&](MetricRow row) {
    row.wall_ms = wall_ms();
    row.seed = cfg.seed;
    if (metrics.is_open()) metrics << format_metric_row(row) << '\n' << std::flush;
    result.history.push_back(std::move(row));
  };

  AdamState adam;
  Rng dropout_rng(mix_seed(cfg.seed, 0x64726f70ULL));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Tensor> best = params.snapshot();
  bool have_best = false;
  const auto& selection = data.val.empty() ? data.train : data.val;

  try {
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      Rng shuffle_rng(mix_seed(cfg.seed, epoch));
      shuffle_rng.shuffle(std::span<std::size_t>(order));
      double loss_sum = 0.0;
      std::size_t correct = 0, seen = 0;
      for (std::size_t i = 0; i < order.size(); i += cfg.batch) {
        std::vector<const Sample*> picked;
        for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch); ++j) picked.push_back(&data.train[order[j]]);
        SequenceBatch batch = make_batch(std::span<const Sample* const>(picked));

        Graph g(precision);
        std::vector<BlockTrace> traces;
        ForwardOptions fo;
        fo.training = true;
        fo.dropout_rng = &dropout_rng;
        if (observer && observer->traces) fo.traces = &traces;
        ForwardResult f = model.forward(g, batch, fo);
        Var loss = nll_loss(f.logits, batch.labels);
        if (observer && observer->on_batch) observer->on_batch(g, f, traces);

        params.zero_grad();
        g.backward(loss);
        if (cfg.clip > 0.0) clip_gradients(params, cfg.clip);
        if (cfg.optimizer == OptimizerKind::Adam) {
          adam_step(params, adam, cfg);
        } else {
          sgd_step(params, cfg);
        }
        params.quantize(precision);
        ++result.steps;

        loss_sum += loss.value().item() * static_cast<double>(batch.size());
        const auto pred = predict(f.logits.value());
        for (std::size_t b = 0; b < pred.size(); ++b) correct += pred[b] == batch.labels[b];
        seen += batch.size();
      }
      emit({epoch, result.steps, "train", loss_sum / static_cast<double>(seen),
            static_cast<double>(correct) / static_cast<double>(seen)});

      if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
        EvalResult ev = evaluate(model, selection, cfg.batch);
        if (!std::isfinite(ev.loss)) throw NumericError("validation loss is not finite");
        emit({epoch, result.steps, "val", ev.loss, ev.accuracy});
        if (!have_best || ev.accuracy > result.best_val_accuracy) {
          have_best = true;
          result.best_val_accuracy = ev.accuracy;
          result.best_epoch = epoch;
          best = params.snapshot();
          if (!cfg.out.empty()) save_checkpoint(params, cfg.out / "checkpoint_best.bin", precision);
        }
      }
    }
  } catch (const NumericError&) {
    if (!cfg.out.empty()) save_checkpoint(params, cfg.out / "checkpoint_last.bin", precision);
    throw;
  }

  if (!cfg.out.empty()) save_checkpoint(params, cfg.out / "checkpoint_last.bin", precision);
  params.restore(best);
  if (!cfg.out.empty() && !have_best) save_checkpoint(params, cfg.out / "checkpoint_best.bin", precision);
  if (cfg.epochs > 0 && !data.test.empty()) {
    result.test = evaluate(model, data.test, cfg.batch);
    emit({cfg.epochs, result.steps, "test", result.test.loss, result.test.accuracy});
  }
  return result;
}

}  // namespace nrnm
