#pragma once

// Non-local recurrent memory cell.
//
// Every `win` steps, once a full block of k steps exists, the cell gathers
// u = ceil(k/s) strided hidden states of its host layer together with the
// matching inputs, lets all 2u units attend to each other, and keeps the u
// hidden-state positions as the block embedding. A gated recurrent update
// folds that embedding into the memory state, and between updates the
// memory feeds a gated term into the host LSTM's cell state.
//
// Batched tensors: a memory state for B sequences is stored as [B, u*m],
// each row the row-major flattening of that sequence's [u, m] matrix.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/lstm.hpp"
#include "nrnm/rng.hpp"

namespace nrnm {

enum class AttentionScale {
  FullWidth,  // logits / sqrt(m)
  PerHead,    // logits / sqrt(m / heads)
};

struct NrnmConfig {
  std::size_t k = 8;     // block size in steps
  std::size_t s = 1;     // stride inside a block
  std::size_t win = 4;   // steps between memory updates
  std::size_t m = 32;    // memory hidden size, equal to the host layer's d_h
  std::size_t heads = 4;
  std::size_t inject_layer = 1;
  AttentionScale scale = AttentionScale::FullWidth;

  std::size_t units() const { return (k + s - 1) / s; }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct NrnmParams {
  Parameter* P_x = nullptr;   // [D, m]      input projection
  Parameter* W_q = nullptr;   // [m, m]
  Parameter* W_k = nullptr;   // [m, m]
  Parameter* W_v = nullptr;   // [m, m]
  Parameter* W_o = nullptr;   // [m, m]      head mixer
  Parameter* W_fc = nullptr;  // [m, m]      post-attention layer
  Parameter* b_fc = nullptr;  // [m]
  Parameter* W_im = nullptr;  // [u*D + u*m, u*m]
  Parameter* W_fm = nullptr;  // [u*D + u*m, u*m]
  Parameter* B_im = nullptr;  // [u*m]
  Parameter* B_fm = nullptr;  // [u*m]
  Parameter* W_m = nullptr;   // [D, d_h]
  Parameter* U_m = nullptr;   // [u*m, d_h]
  Parameter* b_m = nullptr;   // [d_h]
  Parameter* V_m = nullptr;   // [u*m, d_h]  flattened memory -> cell-state space

  static NrnmParams create(ParameterStore& store, const std::string& prefix, const NrnmConfig& cfg,
                           std::size_t input_dim, std::size_t d_h, Rng& rng);
};

struct MemoryState {
  Var M;  // [B, u*m]
  std::size_t produced_at = 0;
  bool valid = false;
};

// Zero memory, not yet valid.
MemoryState initial_memory(Graph& g, std::size_t batch, const NrnmConfig& cfg);

// Steps t-k+1+s*j for j = 0..u-1, or nothing when t < k-1.
std::optional<std::vector<std::size_t>> block_steps(std::size_t t, const NrnmConfig& cfg);

// [B*2u, m]: per sequence, u strided hidden states then the matching inputs
// projected by P_x. Empty when no full block ends at t.
std::optional<Var> assemble_block(Graph& g, std::span<const Var> hidden, std::span<const Var> inputs,
                                  std::size_t t, const NrnmConfig& cfg, const NrnmParams& p);

struct MemoryEmbedding {
  Var embedding;                          // [B, u*m]
  std::shared_ptr<const Tensor> weights;  // [B, heads, 2u, 2u]
};

// Self-attention over the 2u source units followed by two residual
// sublayers: A = C + attn(C) W_o, Z = A + tanh(A W_fc + b_fc). The hidden
// positions (first u rows per block) of Z form the embedding.
MemoryEmbedding memory_embedding(Var block, const NrnmParams& p, const NrnmConfig& cfg);

// M = G_i * tanh(embedding) + G_f * prev.M with both gates computed from the
// strided block inputs and the previous memory. block_inputs: [B, u*D].
MemoryState update_memory(Graph& g, Var embedding, const MemoryState& prev, Var block_inputs,
                          const NrnmParams& p, std::size_t block_end);

// Memory terms that do not depend on the current input; computed once per
// memory state and reused by memory_contribution for every step it serves.
struct MemoryReadout {
  Var projected;  // flatten(M) V_m            [B, d_h]
  Var gate_term;  // flatten(M) U_m            [B, d_h]
  bool valid = false;
};

MemoryReadout read_memory(Graph& g, const MemoryState& mem, const NrnmParams& p);

// g_m * (flatten(M) V_m) with g_m = sigmoid(x W_m + flatten(M) U_m + b_m).
// Zeros of shape [B, d_h] when the memory is not valid yet.
Var memory_contribution(Graph& g, const MemoryReadout& readout, Var x, const NrnmParams& p);
Var memory_contribution(Graph& g, const MemoryState& mem, Var x, const NrnmParams& p);

// Block ends k-1, k-1+win, ... below T.
std::vector<std::size_t> memory_schedule(std::size_t T, const NrnmConfig& cfg);

struct BlockTrace {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> source_steps;
  std::shared_ptr<const Tensor> attention;  // [B, heads, 2u, 2u]
  Tensor memory;                            // [B, u*m]
};

// Drives one NRNM cell attached to one LSTM layer during a stacked rollout.
class NrnmRunner : public LayerHook {
 public:
  NrnmRunner(Graph& g, const NrnmConfig& cfg, const NrnmParams& p, std::span<const Var> inputs,
             std::vector<BlockTrace>* traces = nullptr);

  std::optional<Var> contribution(std::size_t layer, std::size_t t) override;
  void after_step(std::size_t layer, std::size_t t, std::span<const Var> hidden) override;

  // Zero contributions while still computing the memory (for equivalence checks).
  void suppress_contribution(bool on) { suppress_ = on; }
  std::size_t updates() const { return updates_; }
  const MemoryState& memory() const { return memory_; }

 private:
  Graph& g_;
  NrnmConfig cfg_;
  NrnmParams p_;
  std::span<const Var> inputs_;
  std::vector<BlockTrace>* traces_;
  MemoryState memory_;
  MemoryReadout readout_;
  std::size_t updates_ = 0;
  bool suppress_ = false;
};

// Dispatches hook calls to several runners by layer.
class HookSet : public LayerHook {
 public:
  void add(std::size_t layer, LayerHook* hook) { hooks_.push_back({layer, hook}); }
  std::optional<Var> contribution(std::size_t layer, std::size_t t) override;
  void after_step(std::size_t layer, std::size_t t, std::span<const Var> hidden) override;

 private:
  std::vector<std::pair<std::size_t, LayerHook*>> hooks_;
};

}  // namespace nrnm
