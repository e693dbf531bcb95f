#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "klctl/error.hpp"

namespace klctl {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]";
}

// Dense row-major matrix. Every tensor in the engine is rank 2; vectors are
// 1xN or Nx1 and scalars are 1x1.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0)) : shape{rows, cols}, data(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values) : shape{rows, cols}, data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw StructuralError("tensor " + to_string(shape) + " given " + std::to_string(data.size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(1, 1, std::vector<T>{v}); }
  static Tensor row(std::vector<T> v) {
    const auto n = v.size();
    return Tensor(1, n, std::move(v));
  }

  std::size_t rows() const { return shape.rows; }
  std::size_t cols() const { return shape.cols; }
  std::size_t size() const { return data.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }

  std::span<T> row_span(std::size_t r) { return {data.data() + r * shape.cols, shape.cols}; }
  std::span<const T> row_span(std::size_t r) const { return {data.data() + r * shape.cols, shape.cols}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
  }
};

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.rows(), t.cols());
  std::transform(t.data.begin(), t.data.end(), out.data.begin(), [](From v) { return static_cast<To>(v); });
  return out;
}

}  // namespace klctl
