#include "nrnm/autograd.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>

#include <Eigen/Core>
#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.storage().data(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.storage().data(), t.rows(), t.cols()); }

void require_rank2(const char* op, const Var& a) {
  if (a.value().rank() != 2) {
    throw DimensionError(fmt::format("{}: expected a matrix, got shape {}", op, to_string(a.shape())));
  }
}

void require_same(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch(op, a.shape(), b.shape());
}

Graph& common_graph(const char* op, const Var& a, const Var& b) {
  if (&a.graph() != &b.graph()) throw UsageError(std::string(op) + ": operands live on different tapes");
  return a.graph();
}

// Open-interval bounds for saturating activations at the given precision.
struct OpenBounds {
  double lo;
  double hi;
};

OpenBounds unit_bounds(Precision p) {
  if (p == Precision::F32) {
    return {static_cast<double>(std::numeric_limits<float>::denorm_min()),
            static_cast<double>(std::nextafter(1.0f, 0.0f))};
  }
  return {std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0)};
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename F>
Var unary(const char* op, Var a, F&& f, Graph::BackwardFn backward) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = f(v);
  return a.graph().record(op, std::move(out), {a}, std::move(backward));
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Graph

Graph& Var::graph() const {
  if (!graph_) throw UsageError("use of an empty Var");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(*this); }

Graph::Graph(Precision precision, bool grad_enabled)
    : precision_(precision), grad_enabled_(grad_enabled) {
  nodes_.reserve(1024);
}

Var Graph::param(Parameter& p) {
  if (auto it = param_leaves_.find(&p); it != param_leaves_.end()) return Var(this, it->second);
  Node n{"param", p.value, {}, false, grad_enabled_, {}, {}, grad_enabled_ ? &p : nullptr};
  nodes_.push_back(std::move(n));
  param_leaves_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor t) {
  t.quantize(precision_);
  nodes_.push_back(Node{"constant", std::move(t), {}, false, false, {}, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor t) {
  t.quantize(precision_);
  nodes_.push_back(Node{"variable", std::move(t), {}, false, grad_enabled_, {}, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

void Graph::check_owned(Var v, const char* what) const {
  if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
    throw UsageError(std::string(what) + ": value is not on this tape");
  }
}

Var Graph::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  value.quantize(precision_);
  if (!value.all_finite()) throw NumericError(fmt::format("{}: non-finite result", op));
  Node n{op, std::move(value), {}, false, false, {}, {}, nullptr};
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owned(in, op);
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id()].value;
}

Tensor Graph::grad(Var v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[v.id()];
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

bool Graph::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id()].requires_grad;
}

void Graph::backward(Var loss) {
  check_owned(loss, "backward");
  Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + to_string(root.value.shape()));
  }
  if (!root.requires_grad) throw UsageError("backward: loss does not depend on any recorded parameter");

  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;

  std::vector<Tensor*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.param) {
      if (n.param->grad.shape() != n.value.shape()) n.param->grad = Tensor(n.value.shape());
      auto& dst = n.param->grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    if (!n.backward) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      Node& in = nodes_[n.inputs[j]];
      if (!in.requires_grad) continue;
      if (!in.has_grad) {
        in.grad = Tensor(in.value.shape());
        in.has_grad = true;
      }
      slots[j] = &in.grad;
    }
    n.backward(n.grad, slots);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra and pointwise ops

Var matmul(Var a, Var b) {
  Graph& g = common_graph("matmul", a, b);
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.shape()[1] != b.shape()[0]) throw_shape_mismatch("matmul", a.shape(), b.shape());
  Tensor out({a.shape()[0], b.shape()[1]});
  as_matrix(out).noalias() = as_matrix(a.value()) * as_matrix(b.value());
  return g.record("matmul", std::move(out), {a, b},
                  [a, b](const Tensor& go, std::span<Tensor* const> gi) {
                    if (gi[0]) as_matrix(*gi[0]).noalias() += as_matrix(go) * as_matrix(b.value()).transpose();
                    if (gi[1]) as_matrix(*gi[1]).noalias() += as_matrix(a.value()).transpose() * as_matrix(go);
                  });
}

Var add(Var a, Var b) {
  Graph& g = common_graph("add", a, b);
  require_same("add", a, b);
  Tensor out = a.value();
  auto& o = out.storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return g.record("add", std::move(out), {a, b}, [](const Tensor& go, std::span<Tensor* const> gi) {
    for (Tensor* t : gi) {
      if (!t) continue;
      auto& d = t->storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  Graph& g = common_graph("sub", a, b);
  require_same("sub", a, b);
  Tensor out = a.value();
  auto& o = out.storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return g.record("sub", std::move(out), {a, b}, [](const Tensor& go, std::span<Tensor* const> gi) {
    if (gi[0]) {
      auto& d = gi[0]->storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
    }
    if (gi[1]) {
      auto& d = gi[1]->storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = common_graph("mul", a, b);
  require_same("mul", a, b);
  Tensor out = a.value();
  auto& o = out.storage();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return g.record("mul", std::move(out), {a, b}, [a, b](const Tensor& go, std::span<Tensor* const> gi) {
    const auto& av = a.value().storage();
    const auto& bv = b.value().storage();
    if (gi[0]) {
      auto& d = gi[0]->storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * bv[i];
    }
    if (gi[1]) {
      auto& d = gi[1]->storage();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * av[i];
    }
  });
}

Var add_bias(Var a, Var bias) {
  Graph& g = common_graph("add_bias", a, bias);
  require_rank2("add_bias", a);
  if (bias.value().rank() != 1 || bias.shape()[0] != a.shape()[1]) {
    throw_shape_mismatch("add_bias", a.shape(), bias.shape());
  }
  Tensor out = a.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  const auto& bv = bias.value().storage();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  return g.record("add_bias", std::move(out), {a, bias},
                  [rows, cols](const Tensor& go, std::span<Tensor* const> gi) {
                    if (gi[0]) {
                      auto& d = gi[0]->storage();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
                    }
                    if (gi[1]) {
                      auto& d = gi[1]->storage();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) d[c] += go.at(r, c);
                    }
                  });
}

Var scale(Var a, double factor) { return affine(a, factor, 0.0); }

Var affine(Var a, double alpha, double beta) {
  return unary("affine", a, [=](double x) { return alpha * x + beta; },
               [alpha](const Tensor& go, std::span<Tensor* const> gi) {
                 auto& d = gi[0]->storage();
                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * go[i];
               });
}

Var mul_const(Var a, const Tensor& c) {
  if (a.shape() != c.shape()) throw_shape_mismatch("mul_const", a.shape(), c.shape());
  auto factor = std::make_shared<const Tensor>(c);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return a.graph().record("mul_const", std::move(out), {a},
                          [factor](const Tensor& go, std::span<Tensor* const> gi) {
                            auto& d = gi[0]->storage();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * (*factor)[i];
                          });
}

Var sigmoid(Var a) {
  Graph& g = a.graph();
  const OpenBounds b = unit_bounds(g.precision());
  const Var self(&g, g.size());
  return unary("sigmoid", a, [b](double x) { return std::clamp(stable_sigmoid(x), b.lo, b.hi); },
               [self](const Tensor& go, std::span<Tensor* const> gi) {
                 const auto& y = self.value().storage();
                 auto& d = gi[0]->storage();
                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * y[i] * (1.0 - y[i]);
               });
}

Var tanh(Var a) {
  Graph& g = a.graph();
  const double hi = g.precision() == Precision::F32 ? static_cast<double>(std::nextafter(1.0f, 0.0f))
                                                    : std::nextafter(1.0, 0.0);
  const Var self(&g, g.size());
  return unary("tanh", a, [hi](double x) { return std::clamp(std::tanh(x), -hi, hi); },
               [self](const Tensor& go, std::span<Tensor* const> gi) {
                 const auto& y = self.value().storage();
                 auto& d = gi[0]->storage();
                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i] * (1.0 - y[i] * y[i]);
               });
}

Var softmax_rows(Var a) {
  require_rank2("softmax_rows", a);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, out.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = std::exp(out.at(r, c) - mx);
      total += out.at(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= total;
  }
  const Var self(&a.graph(), a.graph().size());
  return a.graph().record("softmax_rows", std::move(out), {a},
                          [self, rows, cols](const Tensor& go, std::span<Tensor* const> gi) {
                            const Tensor& y = self.value();
                            for (std::size_t r = 0; r < rows; ++r) {
                              double dot = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) dot += go.at(r, c) * y.at(r, c);
                              for (std::size_t c = 0; c < cols; ++c)
                                gi[0]->at(r, c) += y.at(r, c) * (go.at(r, c) - dot);
                            }
                          });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().storage()) total += v;
  return a.graph().record("sum", Tensor::scalar(total), {a}, [](const Tensor& go, std::span<Tensor* const> gi) {
    const double g = go[0];
    for (double& d : gi[0]->storage()) d += g;
  });
}

// ---------------------------------------------------------------------------
// Structural ops

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  Graph& g = parts[0].graph();
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_rank2("concat_rows", p);
    if (p.shape()[1] != cols) throw_shape_mismatch("concat_rows", parts[0].shape(), p.shape());
    rows += p.shape()[0];
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto& src = p.value().storage();
    std::copy(src.begin(), src.end(), out.storage().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
  }
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) sizes.push_back(p.value().size());
  return g.record("concat_rows", std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                  [sizes](const Tensor& go, std::span<Tensor* const> gi) {
                    std::size_t off = 0;
                    for (std::size_t j = 0; j < gi.size(); ++j) {
                      if (gi[j]) {
                        auto& d = gi[j]->storage();
                        for (std::size_t i = 0; i < sizes[j]; ++i) d[i] += go[off + i];
                      }
                      off += sizes[j];
                    }
                  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  Graph& g = parts[0].graph();
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require_rank2("concat_cols", p);
    if (p.shape()[0] != rows) throw_shape_mismatch("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.shape()[1]);
    cols += p.shape()[1];
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const Tensor& src = parts[j].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[j]; ++c) out.at(r, c0 + c) = src.at(r, c);
    c0 += widths[j];
  }
  return g.record("concat_cols", std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                  [widths, rows](const Tensor& go, std::span<Tensor* const> gi) {
                    std::size_t c0 = 0;
                    for (std::size_t j = 0; j < gi.size(); ++j) {
                      if (gi[j]) {
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[j]; ++c) gi[j]->at(r, c) += go.at(r, c0 + c);
                      }
                      c0 += widths[j];
                    }
                  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  require_rank2("slice_rows", a);
  const std::size_t cols = a.shape()[1];
  if (begin + count > a.shape()[0]) {
    throw DimensionError(fmt::format("slice_rows: rows [{}, {}) out of range for {}", begin, begin + count,
                                     to_string(a.shape())));
  }
  const auto& src = a.value().storage();
  const auto first = src.begin() + static_cast<std::ptrdiff_t>(begin * cols);
  Tensor out({count, cols}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * cols)));
  return a.graph().record("slice_rows", std::move(out), {a},
                          [begin, cols](const Tensor& go, std::span<Tensor* const> gi) {
                            auto& d = gi[0]->storage();
                            for (std::size_t i = 0; i < go.size(); ++i) d[begin * cols + i] += go[i];
                          });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  require_rank2("slice_cols", a);
  const std::size_t rows = a.shape()[0];
  if (begin + count > a.shape()[1]) {
    throw DimensionError(fmt::format("slice_cols: cols [{}, {}) out of range for {}", begin, begin + count,
                                     to_string(a.shape())));
  }
  Tensor out({rows, count});
  const Tensor& src = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = src.at(r, begin + c);
  return a.graph().record("slice_cols", std::move(out), {a},
                          [begin, rows, count](const Tensor& go, std::span<Tensor* const> gi) {
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < count; ++c) gi[0]->at(r, begin + c) += go.at(r, c);
                          });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record("reshape", std::move(out), {a}, [](const Tensor& go, std::span<Tensor* const> gi) {
    auto& d = gi[0]->storage();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[i];
  });
}

Var interleave_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("interleave_rows: no parts");
  Graph& g = parts[0].graph();
  const Shape& s0 = parts[0].shape();
  for (const Var& p : parts) {
    require_rank2("interleave_rows", p);
    if (p.shape() != s0) throw_shape_mismatch("interleave_rows", s0, p.shape());
  }
  const std::size_t n = parts.size(), batch = s0[0], cols = s0[1];
  Tensor out({batch * n, cols});
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor& src = parts[j].value();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < cols; ++c) out.at(b * n + j, c) = src.at(b, c);
  }
  return g.record("interleave_rows", std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                  [n, batch, cols](const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t j = 0; j < n; ++j) {
                      if (!gi[j]) continue;
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t c = 0; c < cols; ++c) gi[j]->at(b, c) += go.at(b * n + j, c);
                    }
                  });
}

Var block_rows(Var a, std::size_t block, std::size_t begin, std::size_t count) {
  require_rank2("block_rows", a);
  const std::size_t total = a.shape()[0], cols = a.shape()[1];
  if (block == 0 || total % block != 0 || begin + count > block) {
    throw DimensionError(fmt::format("block_rows: cannot take rows [{}, {}) of blocks of {} from {}", begin,
                                     begin + count, block, to_string(a.shape())));
  }
  const std::size_t blocks = total / block;
  Tensor out({blocks * count, cols});
  const Tensor& src = a.value();
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t c = 0; c < cols; ++c) out.at(b * count + r, c) = src.at(b * block + begin + r, c);
  return a.graph().record("block_rows", std::move(out), {a},
                          [=](const Tensor& go, std::span<Tensor* const> gi) {
                            for (std::size_t b = 0; b < blocks; ++b)
                              for (std::size_t r = 0; r < count; ++r)
                                for (std::size_t c = 0; c < cols; ++c)
                                  gi[0]->at(b * block + begin + r, c) += go.at(b * count + r, c);
                          });
}

Var select_rows(Var fresh, Var stale, const std::vector<char>& keep) {
  Graph& g = common_graph("select_rows", fresh, stale);
  require_same("select_rows", fresh, stale);
  require_rank2("select_rows", fresh);
  const std::size_t rows = fresh.shape()[0], cols = fresh.shape()[1];
  if (keep.size() != rows) {
    throw DimensionError(fmt::format("select_rows: mask of {} for {} rows", keep.size(), rows));
  }
  Tensor out = fresh.value();
  const Tensor& old = stale.value();
  for (std::size_t r = 0; r < rows; ++r) {
    if (keep[r]) continue;
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = old.at(r, c);
  }
  return g.record("select_rows", std::move(out), {fresh, stale},
                  [keep, rows, cols](const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      Tensor* dst = keep[r] ? gi[0] : gi[1];
                      if (!dst) continue;
                      for (std::size_t c = 0; c < cols; ++c) dst->at(r, c) += go.at(r, c);
                    }
                  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_rank2("cross_entropy", logits);
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw DimensionError(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), batch));
  }
  auto probs = std::make_shared<Tensor>(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DimensionError(fmt::format("cross_entropy: label {} outside [0, {})", y, classes));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, probs->at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(probs->at(r, c) - mx);
    const double lse = mx + std::log(total);
    loss += lse - probs->at(r, static_cast<std::size_t>(y));
    for (std::size_t c = 0; c < classes; ++c) probs->at(r, c) = std::exp(probs->at(r, c) - lse);
  }
  loss /= static_cast<double>(batch);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph().record("cross_entropy", Tensor::scalar(loss), {logits},
                               [probs, ys, batch, classes](const Tensor& go, std::span<Tensor* const> gi) {
                                 const double g = go[0] / static_cast<double>(batch);
                                 for (std::size_t r = 0; r < batch; ++r)
                                   for (std::size_t c = 0; c < classes; ++c) {
                                     const double target = static_cast<int>(c) == ys[r] ? 1.0 : 0.0;
                                     gi[0]->at(r, c) += g * (probs->at(r, c) - target);
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Blockwise multi-head attention

BlockAttention block_attention(Var q, Var k, Var v, std::size_t block, std::size_t heads, double logit_scale) {
  Graph& g = common_graph("block_attention", q, k);
  common_graph("block_attention", q, v);
  require_rank2("block_attention", q);
  require_same("block_attention", q, k);
  require_same("block_attention", q, v);
  const std::size_t total = q.shape()[0], width = q.shape()[1];
  if (block == 0 || total % block != 0) {
    throw DimensionError(fmt::format("block_attention: {} rows do not split into blocks of {}", total, block));
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError(fmt::format("block_attention: width {} not divisible by {} heads", width, heads));
  }
  const std::size_t blocks = total / block, dk = width / heads;
  auto weights = std::make_shared<Tensor>(Shape{blocks, heads, block, block});
  Tensor out({total, width});

  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  auto w_at = [&, block, heads](std::size_t b, std::size_t h, std::size_t i, std::size_t j) -> double& {
    return (*weights)[((b * heads + h) * block + i) * block + j];
  };

  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t r0 = b * block;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dk;
      for (std::size_t i = 0; i < block; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < block; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += Q.at(r0 + i, c0 + c) * K.at(r0 + j, c0 + c);
          s *= logit_scale;
          w_at(b, h, i, j) = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < block; ++j) {
          w_at(b, h, i, j) = std::exp(w_at(b, h, i, j) - mx);
          z += w_at(b, h, i, j);
        }
        for (std::size_t j = 0; j < block; ++j) w_at(b, h, i, j) /= z;
        for (std::size_t j = 0; j < block; ++j) {
          const double w = w_at(b, h, i, j);
          for (std::size_t c = 0; c < dk; ++c) out.at(r0 + i, c0 + c) += w * V.at(r0 + j, c0 + c);
        }
      }
    }
  }
  weights->quantize(g.precision());
  if (!weights->all_finite()) throw NumericError("block_attention: non-finite attention weights");

  Var result = g.record(
      "block_attention", std::move(out), {q, k, v},
      [q, k, v, weights, blocks, block, heads, dk, logit_scale](const Tensor& go, std::span<Tensor* const> gi) {
        const Tensor& Q = q.value();
        const Tensor& K = k.value();
        const Tensor& V = v.value();
        std::vector<double> dp(block), ds(block);
        for (std::size_t b = 0; b < blocks; ++b) {
          const std::size_t r0 = b * block;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dk;
            const double* w = &(*weights)[(b * heads + h) * block * block];
            for (std::size_t i = 0; i < block; ++i) {
              // dP_ij = dO_i . V_j
              double dot = 0.0;
              for (std::size_t j = 0; j < block; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) s += go.at(r0 + i, c0 + c) * V.at(r0 + j, c0 + c);
                dp[j] = s;
                dot += s * w[i * block + j];
              }
              for (std::size_t j = 0; j < block; ++j) ds[j] = w[i * block + j] * (dp[j] - dot) * logit_scale;
              for (std::size_t j = 0; j < block; ++j) {
                if (gi[2]) {
                  const double wij = w[i * block + j];
                  for (std::size_t c = 0; c < dk; ++c) gi[2]->at(r0 + j, c0 + c) += wij * go.at(r0 + i, c0 + c);
                }
                if (gi[0]) {
                  for (std::size_t c = 0; c < dk; ++c) gi[0]->at(r0 + i, c0 + c) += ds[j] * K.at(r0 + j, c0 + c);
                }
                if (gi[1]) {
                  for (std::size_t c = 0; c < dk; ++c) gi[1]->at(r0 + j, c0 + c) += ds[j] * Q.at(r0 + i, c0 + c);
                }
              }
            }
          }
        }
      });
  return {result, weights};
}

}  // namespace nrnm
