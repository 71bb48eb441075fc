#include "nrnm/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const char* to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("precision", "expected f32 or f64, got '" + s + "'");
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(num_elements(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (num_elements(shape_) != data_.size()) {
    throw DimensionError(fmt::format("tensor shape {} holds {} values, got {}", to_string(shape_),
                                     num_elements(shape_), data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

void Tensor::throw_not_matrix(const char* what) const {
  throw DimensionError(std::string(what) + " requires rank <= 2, got " + to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (num_elements(shape) != data_.size()) throw_shape_mismatch("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::quantize(Precision p) {
  if (p != Precision::F32) return;
  for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
}

void throw_shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(fmt::format("{}: shape mismatch {} vs {}", op, to_string(a), to_string(b)));
}

}  // namespace nrnm
