#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace stf {

// Dense row-major N-d tensor. Shapes are small, data can be large.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool empty() const { return data.empty(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // Flat access.
  T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  T operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

  template <typename... Ix>
  T& at(Ix... ix) {
    return data[static_cast<size_t>(offset(ix...))];
  }
  template <typename... Ix>
  T at(Ix... ix) const {
    return data[static_cast<size_t>(offset(ix...))];
  }

  template <typename... Ix>
  std::int64_t offset(Ix... ix) const {
    const int idx[] = {static_cast<int>(ix)...};
    constexpr int n = sizeof...(Ix);
    assert(n == ndim());
    std::int64_t off = 0;
    for (int i = 0; i < n; ++i) {
      assert(idx[i] >= 0 && idx[i] < shape[static_cast<size_t>(i)]);
      off = off * shape[static_cast<size_t>(i)] + idx[i];
    }
    return off;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != numel()) throw std::invalid_argument("tensor: reshape numel mismatch");
    return Tensor(std::move(s), data);
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T max_abs() const {
    T m = 0;
    for (T v : data) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
    return m;
  }
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  T m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, static_cast<T>(std::abs(static_cast<double>(a[i] - b[i]))));
  return m;
}

}  // namespace stf
