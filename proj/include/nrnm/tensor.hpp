#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace nrnm {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t num_elements(const Shape& shape);

// Storage precision. Values are always held as double; in F32 mode every
// recorded result is rounded to the nearest float.
enum class Precision { F32, F64 };

const char* to_string(Precision p);
Precision parse_precision(const std::string& s);

// Dense row-major real array of rank 0..3.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Rank-2 view helpers. A rank-1 tensor of extent n behaves as a 1 x n row.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() > 2) throw_not_matrix("rows()");
    return 1;
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() > 2) throw_not_matrix("cols()");
    return shape_.empty() ? 1 : shape_[0];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double item() const;

  // Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const;

  // Round every entry to the nearest float when p is F32.
  void quantize(Precision p);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  [[noreturn]] void throw_not_matrix(const char* what) const;

  Shape shape_;
  std::vector<double> data_;
};

// Throws DimensionError naming both shapes.
[[noreturn]] void throw_shape_mismatch(const char* op, const Shape& a, const Shape& b);

}  // namespace nrnm
