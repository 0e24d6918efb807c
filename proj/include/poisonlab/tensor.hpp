#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "poisonlab/errors.hpp"

namespace poisonlab {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) fail(ErrorKind::usage, "tensor dims must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

// Dense row-major tensor. Deliberately minimal: flat storage plus a shape,
// with indexing helpers for the few ranks the models use. All numerics that
// matter for speed walk .data() directly.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape)) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), v(std::move(values)) {
    if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
      fail(ErrorKind::usage, "tensor data size does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }
  static Tensor scalar(T value) { return full({1}, value); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  // Rank-specific accessors; the call sites always know their rank.
  T& at2(int i, int j) { return v[static_cast<std::size_t>(i) * dim(1) + j]; }
  const T& at2(int i, int j) const { return v[static_cast<std::size_t>(i) * dim(1) + j]; }
  T& at4(int n, int c, int y, int x) {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }
  const T& at4(int n, int c, int y, int x) const {
    return v[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      fail(ErrorKind::usage,
           "cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    return Tensor(std::move(s), v);
  }

  bool all_finite() const {
    for (const T& x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b))
    fail(ErrorKind::usage, std::string(op) + ": shape mismatch " +
                               shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Max-norm of the difference; the yardstick for perturbation budgets.
template <class T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "linf_distance");
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace poisonlab
