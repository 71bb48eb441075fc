#pragma once

// Sequence classifier: recurrent backbone (LSTM, optionally with NRNM cells,
// or one of the baselines) followed by an affine head on the hidden state at
// each sequence's last valid step.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/baselines.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/lstm.hpp"
#include "nrnm/nrnm_cell.hpp"
#include "nrnm/rng.hpp"
#include "nrnm/tasks.hpp"

namespace nrnm {

enum class ModelKind { Lstm, Rnn, Gru, HighOrder, Nrnm };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::Nrnm;
  std::size_t depth = 3;
  // One width per layer, or a single width shared by all layers.
  std::vector<std::size_t> hidden = {32};
  std::size_t input_dim = 0;
  std::size_t classes = 2;
  NrnmConfig nrnm;  // read only when kind == Nrnm
  // Additional layers that receive their own NRNM cell (ablation only).
  std::vector<std::size_t> extra_inject_layers;
  std::size_t order = 3;  // high-order RNN lag count
  double dropout = 0.5;
  Precision precision = Precision::F64;
  std::uint64_t seed = 1;

  std::size_t hidden_at(std::size_t layer) const;
  std::vector<std::size_t> inject_layers() const;
  void validate() const;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
  std::vector<BlockTrace>* traces = nullptr;
  // Keep computing memory states but never feed them into the LSTM.
  bool suppress_memory = false;
};

struct ForwardResult {
  Var logits;  // [B, K]
  Tensor probs;
  StackOutput stack;
  std::size_t memory_updates = 0;
};

class SequenceModel {
 public:
  explicit SequenceModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  ForwardResult forward(Graph& g, const SequenceBatch& batch, const ForwardOptions& options = {});

  const std::vector<LstmLayerParams>& lstm_layers() const { return lstm_; }
  const std::vector<BaselineLayerParams>& baseline_layers() const { return baseline_; }
  const std::vector<std::pair<std::size_t, NrnmParams>>& nrnm_cells() const { return cells_; }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  std::vector<LstmLayerParams> lstm_;
  std::vector<BaselineLayerParams> baseline_;
  std::vector<std::pair<std::size_t, NrnmParams>> cells_;
  Parameter* head_W_ = nullptr;  // [d_h, K]
  Parameter* head_b_ = nullptr;  // [K]
};

// Mean negative log-likelihood of the labels, from logits.
Var nll_loss(Var logits, std::span<const int> labels);

// Row-wise softmax of a [B, K] tensor.
Tensor softmax(const Tensor& logits);

// Argmax per row; ties go to the lowest class index.
std::vector<int> predict(const Tensor& logits);
std::vector<int> predict(SequenceModel& model, const SequenceBatch& batch);

// Total parameter count a configuration would allocate.
std::size_t parameter_count(const ModelConfig& cfg);

// Smallest uniform hidden width whose parameter count is closest to target.
// For NRNM models the memory size follows the width.
std::size_t match_hidden_width(ModelConfig cfg, std::size_t target, std::size_t max_width = 1024);

}  // namespace nrnm
