// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace morphdiff {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised for invalid configuration: mismatched dimensions, bad ranges, unknown keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation goes wrong at run time (non-finite loss, degenerate data).
class RuntimeFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array. Plain value type; the autodiff graph wraps it.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<Index>(data.size()) != numel(shape)) {
      throw ConfigError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                        shape_str(shape));
    }
  }

  Index size() const { return static_cast<Index>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }

  T& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != size()) throw ConfigError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    return Tensor(std::move(s), data);
  }
};

}  // namespace morphdiff
