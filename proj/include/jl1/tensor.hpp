#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "jl1/errors.hpp"

namespace jl1 {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw dimension_error("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major (NCHW for images) tensor. `node` links the tensor to
// a position on an autodiff tape; -1 means "not on any tape". `stamp`
// identifies which tape the node id belongs to, so a tensor left over
// from an earlier step can never alias a node on a fresh tape.
template <typename T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  int node = -1;
  std::uint64_t stamp = 0;

  TensorT() = default;
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw dimension_error("tensor data size does not match shape " +
                            shape_str(shape));
  }

  static TensorT zeros(Shape s) {
    auto n = shape_numel(s);
    return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }

  static TensorT full(Shape s, T v) {
    auto n = shape_numel(s);
    return TensorT(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  std::int64_t extent(std::size_t i) const { return shape.at(i); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return data[static_cast<std::size_t>(i)];
  }

  // Multi-index access, bounds-checked; for tests and small tensors.
  T& at(std::initializer_list<std::int64_t> idx) {
    return data[static_cast<std::size_t>(flat_index(idx))];
  }
  const T& at(std::initializer_list<std::int64_t> idx) const {
    return data[static_cast<std::size_t>(flat_index(idx))];
  }

  std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank())
      throw dimension_error("index rank mismatch for shape " + shape_str(shape));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      if (i < 0 || i >= shape[k])
        throw dimension_error("index out of range for shape " + shape_str(shape));
      flat = flat * shape[k] + i;
      ++k;
    }
    return flat;
  }
};

using Tensor = TensorT<float>;

// True iff every value is finite. `v - v == 0` is false for NaN and
// +/-Inf and vectorizes, unlike std::isfinite under -O3.
template <typename T>
inline bool all_finite(std::span<const T> xs) {
  T acc = T(0);
  for (T v : xs) acc += v - v;
  return acc == T(0);
}

template <typename T>
inline bool all_finite(const TensorT<T>& t) {
  return all_finite(std::span<const T>(t.data));
}

}  // namespace jl1
