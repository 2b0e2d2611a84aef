#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace mese {

// Row-major dense matrix of doubles. Training runs in 64-bit so that the
// finite-difference harness resolves gradients well below the acceptance
// tolerance; checkpoints downcast to float32 on disk.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
  const double* row(int r) const {
    return a.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
  }
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
  double at(int r, int c) const {
    return a[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
  }
  void zero() { std::fill(a.begin(), a.end(), 0.0); }
};

inline double dot(std::span<const double> x, std::span<const double> y) {
  assert(x.size() == y.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline double l2_norm(std::span<const double> x) { return std::sqrt(dot(x, x)); }

// Numerically-stable in-place softmax.
inline void softmax_inplace(std::span<double> x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (auto& v : x) {
    v = std::exp(v - m);
    s += v;
  }
  for (auto& v : x) v /= s;
}

// d(softmax)/d(logits) applied to an upstream gradient: given y = softmax(u)
// and dL/dy, returns dL/du into out.
inline void softmax_backward(std::span<const double> y, std::span<const double> dy,
                             std::span<double> du) {
  const double inner = dot(y, dy);
  for (std::size_t i = 0; i < y.size(); ++i) du[i] = y[i] * (dy[i] - inner);
}

inline double log_sum_exp(std::span<const double> x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

}  // namespace mese
