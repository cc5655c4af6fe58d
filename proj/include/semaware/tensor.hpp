#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "semaware/rng.hpp"

namespace semaware {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline void validate_shape(const Shape& s) {
  if (s.empty() || s.size() > 4) {
    throw std::invalid_argument("tensor rank must be 1..4, got shape " + shape_str(s));
  }
  for (auto d : s) {
    if (d == 0) throw std::invalid_argument("zero-extent dimension in shape " + shape_str(s));
  }
}

// Dense row-major tensor of rank 1..4. Rank-4 tensors use (n,k,h,w) order.
// A default-constructed tensor is empty (rank 0) and acts as "not set".
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{0}) : dims_(std::move(dims)) {
    validate_shape(dims_);
    data_.assign(shape_numel(dims_), fill);
  }

  Tensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), data_(std::move(values)) {
    validate_shape(dims_);
    if (data_.size() != shape_numel(dims_)) {
      throw std::invalid_argument("value count " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(dims_));
    }
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims), T{0}); }
  static Tensor ones(Shape dims) { return Tensor(std::move(dims), T{1}); }
  static Tensor from_values(Shape dims, std::vector<T> values) {
    return Tensor(std::move(dims), std::move(values));
  }
  static Tensor uniform(Shape dims, double lo, double hi, SeededRng& rng) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }
  static Tensor normal(Shape dims, double mean, double stddev, SeededRng& rng) {
    Tensor t(std::move(dims));
    for (auto& v : t.data_) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool empty() const { return data_.empty(); }
  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access.
  T& operator()(std::size_t n, std::size_t k, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + k) * dims_[2] + h) * dims_[3] + w];
  }
  const T& operator()(std::size_t n, std::size_t k, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + k) * dims_[2] + h) * dims_[3] + w];
  }

  // Pointer to the contiguous H*W plane of (n,k) in a rank-4 tensor.
  T* plane(std::size_t n, std::size_t k) { return data_.data() + (n * dims_[1] + k) * dims_[2] * dims_[3]; }
  const T* plane(std::size_t n, std::size_t k) const {
    return data_.data() + (n * dims_[1] + k) * dims_[2] * dims_[3];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape dims) const {
    validate_shape(dims);
    if (shape_numel(dims) != size()) {
      throw std::invalid_argument("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool operator==(const Tensor& o) const { return dims_ == o.dims_ && data_ == o.data_; }

 private:
  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t r, const char* what) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(r) +
                                " tensor, got shape " + shape_str(t.dims()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.dims()) +
                                " vs " + shape_str(b.dims()));
  }
}

enum class SpatialStat { mean, std };

// Per-(sample, channel) statistic over H x W. std is the population form
// sqrt(sum (x - mean)^2 / HW + epsilon); epsilon defaults to 0.
template <typename T>
Tensor<T> reduce_spatial(const Tensor<T>& t, SpatialStat stat, double epsilon = 0.0) {
  require_rank(t, 4, "reduce_spatial");
  const std::size_t N = t.dim(0), K = t.dim(1), HW = t.dim(2) * t.dim(3);
  Tensor<T> out({N, K});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* p = t.plane(n, k);
      double mean = 0.0;
      for (std::size_t i = 0; i < HW; ++i) mean += p[i];
      mean /= static_cast<double>(HW);
      if (stat == SpatialStat::mean) {
        out[n * K + k] = static_cast<T>(mean);
        continue;
      }
      double var = 0.0;
      for (std::size_t i = 0; i < HW; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<double>(HW);
      out[n * K + k] = static_cast<T>(std::sqrt(var + epsilon));
    }
  }
  return out;
}

enum class ChannelPool { avg, max };

template <typename T>
Tensor<T> pool_channels(const Tensor<T>& t, ChannelPool mode) {
  require_rank(t, 4, "pool_channels");
  const std::size_t N = t.dim(0), K = t.dim(1), HW = t.dim(2) * t.dim(3);
  Tensor<T> out({N, 1, t.dim(2), t.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out.plane(n, 0);
    std::copy_n(t.plane(n, 0), HW, o);
    for (std::size_t k = 1; k < K; ++k) {
      const T* p = t.plane(n, k);
      if (mode == ChannelPool::avg) {
        for (std::size_t i = 0; i < HW; ++i) o[i] += p[i];
      } else {
        for (std::size_t i = 0; i < HW; ++i) o[i] = std::max(o[i], p[i]);
      }
    }
    if (mode == ChannelPool::avg && K > 1) {
      const T inv = T{1} / static_cast<T>(K);
      for (std::size_t i = 0; i < HW; ++i) o[i] *= inv;
    }
  }
  return out;
}

enum class BinaryOp { add, sub, mul, div };
enum class UnaryOp { sigmoid, relu, abs };

template <typename T>
T apply_binary(BinaryOp op, T a, T b, T div_eps) {
  switch (op) {
    case BinaryOp::add: return a + b;
    case BinaryOp::sub: return a - b;
    case BinaryOp::mul: return a * b;
    case BinaryOp::div:
      if (std::abs(b) < div_eps) b = std::copysign(div_eps, b);
      return a / b;
  }
  return a;
}

// exp that the compiler can vectorize for float (about 2 ulp); std::exp otherwise.
template <typename T>
inline T fast_exp(T x) {
  if constexpr (std::is_same_v<T, float>) {
    x = std::clamp(x, -87.3f, 88.3f);
    const float fx = std::floor(x * 1.44269504088896341f + 0.5f);
    x -= fx * 0.693359375f;
    x -= fx * -2.12194440e-4f;
    float y = 1.9875691500e-4f;
    y = y * x + 1.3981999507e-3f;
    y = y * x + 8.3334519073e-3f;
    y = y * x + 4.1665795894e-2f;
    y = y * x + 1.6666665459e-1f;
    y = y * x + 5.0000001201e-1f;
    y = y * x * x + x + 1.0f;
    const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(fx) + 127) << 23;
    return y * std::bit_cast<float>(bits);
  } else {
    return std::exp(x);
  }
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + fast_exp(-x));
}

// Elementwise op. `other` must either match `t` or be an (N,1,H,W) map that is
// broadcast over the channels of a rank-4 `t`. Divisors below div_eps in
// magnitude are clamped to +-div_eps.
template <typename T>
Tensor<T> ew(const Tensor<T>& t, const Tensor<T>& other, BinaryOp op, T div_eps = T(1e-12)) {
  Tensor<T> out = t;
  if (other.dims() == t.dims()) {
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = apply_binary(op, t[i], other[i], div_eps);
    return out;
  }
  const bool broadcast = t.rank() == 4 && other.rank() == 4 && other.dim(1) == 1 &&
                         other.dim(0) == t.dim(0) && other.dim(2) == t.dim(2) &&
                         other.dim(3) == t.dim(3);
  if (!broadcast) {
    throw std::invalid_argument("ew: cannot combine " + shape_str(t.dims()) + " with " +
                                shape_str(other.dims()));
  }
  const std::size_t HW = t.dim(2) * t.dim(3);
  for (std::size_t n = 0; n < t.dim(0); ++n) {
    const T* m = other.plane(n, 0);
    for (std::size_t k = 0; k < t.dim(1); ++k) {
      T* o = out.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) o[i] = apply_binary(op, o[i], m[i], div_eps);
    }
  }
  return out;
}

template <typename T>
Tensor<T> ew(const Tensor<T>& t, T scalar, BinaryOp op, T div_eps = T(1e-12)) {
  Tensor<T> out = t;
  for (auto& v : out.values()) v = apply_binary(op, v, scalar, div_eps);
  return out;
}

template <typename T>
Tensor<T> ew(const Tensor<T>& t, UnaryOp op) {
  Tensor<T> out = t;
  auto vals = out.values();
  switch (op) {
    case UnaryOp::sigmoid:
      for (auto& v : vals) v = sigmoid(v);
      break;
    case UnaryOp::relu:
      for (auto& v : vals) v = v > T{0} ? v : T{0};
      break;
    case UnaryOp::abs:
      for (auto& v : vals) v = std::abs(v);
      break;
  }
  return out;
}

template <typename T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace semaware
