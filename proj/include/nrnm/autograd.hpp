#pragma once

// Reverse-mode differentiation over a recorded operation tape.
//
// A Graph is a single-owner tape. Every op appends one node holding its
// value and a closure that pushes the output gradient to the inputs.
// Parameters live outside the tape; their leaves accumulate into
// Parameter::grad when backward() runs, so repeated backward passes add up
// until zero_grad() is called.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nrnm/tensor.hpp"

namespace nrnm {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

class Graph;

// Handle to a node on a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  // Receives the output gradient and one slot per input; a slot is null when
  // that input does not need a gradient. Implementations accumulate (+=).
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  explicit Graph(Precision precision = Precision::F64, bool grad_enabled = true);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Precision precision() const { return precision_; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf bound to a parameter. Repeated calls with the same parameter return
  // the same leaf.
  Var param(Parameter& p);
  // Leaf that never receives a gradient.
  Var constant(Tensor t);
  // Leaf that receives a gradient readable through grad().
  Var variable(Tensor t);

  // Appends a node. The value is rounded to the graph precision and must be
  // finite; otherwise NumericError names the op.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() target with respect to v (zeros if none).
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;

  // Propagates d(loss)/d(node) through the tape in reverse order and
  // accumulates into the bound parameters.
  void backward(Var loss);

  // Calls f(op, value) for every node in recording order.
  template <typename F>
  void visit(F&& f) const {
    for (const Node& n : nodes_) f(n.op, n.value);
  }

 private:
  struct Node {
    const char* op;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  void check_owned(Var v, const char* what) const;

  Precision precision_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_leaves_;
};

// ---------------------------------------------------------------------------
// Primitive ops. All binary ops require identical shapes; the only broadcast
// is add_bias, which adds a length-q row to every row of a [p, q] matrix.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_bias(Var a, Var bias);
Var scale(Var a, double factor);
// alpha * a + beta, elementwise.
Var affine(Var a, double alpha, double beta);
Var mul_const(Var a, const Tensor& c);

// Outputs are clamped to the open interval so saturated values never reach
// the bounds exactly.
Var sigmoid(Var a);
Var tanh(Var a);

Var softmax_rows(Var a);
Var sum(Var a);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var reshape(Var a, Shape shape);

// n parts of shape [B, m] -> [B * n, m] with row b * n + j taken from part j.
Var interleave_rows(std::span<const Var> parts);
// a: [B * block, m]. Keeps rows [begin, begin + count) of every block.
Var block_rows(Var a, std::size_t block, std::size_t begin, std::size_t count);

// Row r of the result is row r of fresh where keep[r] is set, else row r of
// stale. Selection, not arithmetic: kept rows are bit-exact copies.
Var select_rows(Var fresh, Var stale, const std::vector<char>& keep);

// Mean negative log-likelihood of labels under softmax(logits), computed
// with log-sum-exp. logits: [B, K].
Var cross_entropy(Var logits, std::span<const int> labels);

struct BlockAttention {
  Var out;                                // [B * R, m]
  std::shared_ptr<const Tensor> weights;  // [B, heads, R, R], rows sum to 1
};

// Multi-head dot-product self-attention applied independently to each block
// of R consecutive rows. Head h uses columns [h*m/heads, (h+1)*m/heads) of
// q, k and v; logits are multiplied by logit_scale before the softmax.
BlockAttention block_attention(Var q, Var k, Var v, std::size_t block, std::size_t heads,
                               double logit_scale);

}  // namespace nrnm
