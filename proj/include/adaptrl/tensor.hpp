#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace adaptrl {

using Shape = std::vector<std::size_t>;

/// Thrown when tensor shapes disagree. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_product(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Exact element-wise equality including shape. NaNs never compare equal.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw ShapeError("dimension " + std::to_string(i) +
                         " of shape " + shape_string(shape_) + " is zero");
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double v) { return std::isfinite(v); });
}

inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Named tensors with lexicographic iteration order. Shapes are fixed once a
/// name is inserted.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  void insert(std::string name, Tensor value) {
    auto [it, inserted] = tensors_.emplace(std::move(name), std::move(value));
    if (!inserted) {
      throw std::invalid_argument("duplicate parameter name: " + it->first);
    }
  }

  /// Overwrites an existing entry; the shape must match.
  void assign(std::string_view name, const Tensor& value) {
    Tensor& slot = at(name);
    if (slot.shape() != value.shape()) {
      throw ShapeError("parameter " + std::string(name) + ": expected shape " +
                       shape_string(slot.shape()) + ", got " +
                       shape_string(value.shape()));
    }
    slot = value;
  }

  bool contains(std::string_view name) const {
    return tensors_.find(name) != tensors_.end();
  }

  Tensor& at(std::string_view name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
      throw std::out_of_range("no parameter named " + std::string(name));
    }
    return it->second;
  }
  const Tensor& at(std::string_view name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
      throw std::out_of_range("no parameter named " + std::string(name));
    }
    return it->second;
  }

  void erase(std::string_view name) {
    auto it = tensors_.find(name);
    if (it != tensors_.end()) tensors_.erase(it);
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  bool empty() const noexcept { return tensors_.empty(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  /// Entries whose name starts with `prefix`.
  ParameterSet subset(std::string_view prefix) const {
    ParameterSet out;
    for (const auto& [name, t] : tensors_) {
      if (name.starts_with(prefix)) out.insert(name, t);
    }
    return out;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& [name, t] : tensors_) out.insert(name, Tensor(t.shape()));
    return out;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.tensors_ == b.tensors_;
  }

 private:
  Map tensors_;
};

/// sqrt of the sum of squares over every entry of every tensor.
inline double global_norm(const ParameterSet& set) {
  double sq = 0.0;
  for (const auto& [name, t] : set) {
    for (double v : t.data()) sq += v * v;
  }
  return std::sqrt(sq);
}

/// Rescales all tensors so the global norm is at most `max_norm`. Returns the
/// norm before clipping.
inline double clip_global_norm(ParameterSet& set, double max_norm) {
  const double norm = global_norm(set);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& [name, t] : set) {
      for (double& v : t.data()) v *= scale;
    }
  }
  return norm;
}

}  // namespace adaptrl
