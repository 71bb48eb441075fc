#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/model.hpp"
#include "nrnm/tasks.hpp"

namespace nrnm {

enum class OptimizerKind { Adam, Sgd };

const char* to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global norm; 0 disables
  std::size_t epochs = 10;
  std::size_t batch = 32;
  std::size_t eval_every = 1;  // epochs between validation passes
  std::uint64_t seed = 1;
  std::filesystem::path out;  // empty: keep everything in memory

  void validate() const;
};

struct AdamState {
  std::size_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// Both updates refuse to move when any gradient is non-finite and throw
// NumericError naming the parameter, so the store keeps its last finite
// values.
void adam_step(ParameterStore& params, AdamState& state, const TrainConfig& cfg);
void sgd_step(ParameterStore& params, const TrainConfig& cfg);

double global_norm(std::span<const Tensor* const> grads);
// Rescales every gradient by max_norm / norm when the global norm exceeds
// max_norm. Returns the norm before clipping.
double clip_gradients(std::span<Tensor* const> grads, double max_norm);
double clip_gradients(ParameterStore& params, double max_norm);

struct EvalResult {
  double loss = 0.0;  // mean over samples
  double accuracy = 0.0;
  std::size_t count = 0;
};

EvalResult evaluate(SequenceModel& model, std::span<const Sample> samples, std::size_t batch_size);

struct MetricRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,step,split,loss,accuracy,wall_ms,seed";
std::string format_metric_row(const MetricRow& row);

// Optional per-batch view into training, after the forward pass.
struct TrainObserver {
  bool traces = false;
  std::function<void(Graph&, const ForwardResult&, const std::vector<BlockTrace>&)> on_batch;
};

struct TrainResult {
  std::vector<MetricRow> history;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;
  EvalResult test;
  std::size_t steps = 0;
};

// Trains in place. With cfg.out set, writes metrics.csv, checkpoint_best.bin
// and checkpoint_last.bin there. On return the model holds the weights with
// the best validation accuracy (the first such epoch on ties); the test split
// is evaluated with those weights.
//
// A non-finite loss or gradient aborts with NumericError after
// checkpoint_last.bin has been written from the last finite state.
TrainResult train(SequenceModel& model, const Dataset& data, const TrainConfig& cfg,
                  const TrainObserver* observer = nullptr);

}  // namespace nrnm
