#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mist/error.hpp"
#include "mist/rng.hpp"

namespace mist {

// Dense row-major tensor of doubles with a runtime shape. All training
// math runs in double; file formats quantize to float32 on the way out.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t ndim() const { return shape.size(); }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }

  // 2-D accessors (rows = shape[0], cols = shape[1]).
  double& at2(int64_t r, int64_t c) { return v[static_cast<size_t>(r * shape[1] + c)]; }
  double at2(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * shape[1] + c)]; }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  Tensor zeros_like() const { return Tensor(shape); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline Tensor random_uniform(std::vector<int64_t> shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_normal(std::vector<int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& x : t.v) x = rng.normal();
  return t;
}

// y += W x + b, with W of shape [out, in]. The k-outer / j-inner loop
// order keeps the weight row access contiguous.
inline void affine_forward(const Tensor& w, const Tensor& b, const double* x, double* y) {
  const int64_t out = w.shape[0], in = w.shape[1];
  for (int64_t o = 0; o < out; ++o) y[o] = b[static_cast<size_t>(o)];
  for (int64_t o = 0; o < out; ++o) {
    const double* wr = w.data() + o * in;
    double acc = 0.0;
    for (int64_t i = 0; i < in; ++i) acc += wr[i] * x[i];
    y[o] += acc;
  }
}

// Backward of y = W x + b given dL/dy: accumulates dW, db and writes dx.
inline void affine_backward(const Tensor& w, const double* x, const double* dy,
                            Tensor& dw, Tensor& db, double* dx) {
  const int64_t out = w.shape[0], in = w.shape[1];
  if (dx) {
    for (int64_t i = 0; i < in; ++i) dx[i] = 0.0;
    for (int64_t o = 0; o < out; ++o) {
      const double g = dy[o];
      const double* wr = w.data() + o * in;
      for (int64_t i = 0; i < in; ++i) dx[i] += g * wr[i];
    }
  }
  for (int64_t o = 0; o < out; ++o) {
    const double g = dy[o];
    db[static_cast<size_t>(o)] += g;
    double* dwr = dw.data() + o * in;
    for (int64_t i = 0; i < in; ++i) dwr[i] += g * x[i];
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace mist
