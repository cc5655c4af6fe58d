#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "semaware/tensor.hpp"

namespace semaware {

struct NormConfig {
  double epsilon = 1e-5;

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("NormConfig: epsilon must be > 0");
  }
};

// K' x K' channel covariance of one sample.
template <typename T>
struct CovMatrix {
  std::size_t size = 0;
  std::vector<T> entries;  // row-major size x size

  T operator()(std::size_t i, std::size_t j) const { return entries[i * size + j]; }
};

// Per-pixel membership of one H x W plane.
struct RegionMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> inside;

  RegionMask() = default;
  RegionMask(std::size_t h, std::size_t w, bool value = false)
      : height(h), width(w), inside(h * w, value ? 1 : 0) {}

  static RegionMask full(std::size_t h, std::size_t w) { return RegionMask(h, w, true); }

  std::size_t count() const {
    std::size_t c = 0;
    for (auto v : inside) c += v;
    return c;
  }
  bool empty() const { return count() == 0; }
  bool operator==(const RegionMask&) const = default;
};

class DegenerateRegionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct PlaneStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

// Sum of f(0..n-1) in double over eight independent partial sums, so the
// loop vectorizes without reassociation flags.
template <typename F>
inline double lane_sum(std::size_t n, F&& f) {
  double acc[8] = {};
  const std::size_t blocks = n / 8;
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += f(8 * b + j);
  }
  double tail = 0.0;
  for (std::size_t i = 8 * blocks; i < n; ++i) tail += f(i);
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

// Two sums in one pass.
template <typename FA, typename FB>
inline std::pair<double, double> lane_sum2(std::size_t n, FA&& fa, FB&& fb) {
  double a[8] = {}, b[8] = {};
  const std::size_t blocks = n / 8;
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    for (std::size_t j = 0; j < 8; ++j) {
      a[j] += fa(8 * blk + j);
      b[j] += fb(8 * blk + j);
    }
  }
  double ta = 0.0, tb = 0.0;
  for (std::size_t i = 8 * blocks; i < n; ++i) {
    ta += fa(i);
    tb += fb(i);
  }
  return {((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + ta,
          ((b[0] + b[4]) + (b[1] + b[5])) + ((b[2] + b[6]) + (b[3] + b[7])) + tb};
}

inline std::size_t mask_count(const std::uint8_t* mask, std::size_t hw) {
  if (!mask) return hw;
  std::size_t c = 0;
  for (std::size_t i = 0; i < hw; ++i) c += mask[i];
  return c;
}

// Population mean/std of `p` over pixels where mask is set (all pixels if mask
// is null).
template <typename T>
PlaneStats masked_stats(const T* p, const std::uint8_t* mask, std::size_t hw) {
  PlaneStats s;
  s.count = mask_count(mask, hw);
  if (s.count == 0) return s;
  const double m = static_cast<double>(s.count);
  if (!mask) {
    s.mean = lane_sum(hw, [&](std::size_t i) { return static_cast<double>(p[i]); }) / m;
    const double mu = s.mean;
    s.std = std::sqrt(lane_sum(hw, [&](std::size_t i) {
                        const double d = p[i] - mu;
                        return d * d;
                      }) /
                      m);
    return s;
  }
  s.mean = lane_sum(hw, [&](std::size_t i) { return static_cast<double>(mask[i]) * p[i]; }) / m;
  const double mu = s.mean;
  s.std = std::sqrt(lane_sum(hw, [&](std::size_t i) {
                      const double d = p[i] - mu;
                      return static_cast<double>(mask[i]) * d * d;
                    }) /
                    m);
  return s;
}

// Same statistics with a 0/1 mask held in the value type, which keeps the
// loops vectorizable.
template <typename T>
PlaneStats weighted_stats(const T* p, const T* w, std::size_t count, std::size_t hw) {
  PlaneStats s;
  s.count = count;
  if (count == 0) return s;
  const double m = static_cast<double>(count);
  const auto [s1, s2] = lane_sum2(
      hw, [&](std::size_t i) { return static_cast<double>(w[i]) * p[i]; },
      [&](std::size_t i) { return static_cast<double>(w[i]) * p[i] * p[i]; });
  s.mean = s1 / m;
  s.std = std::sqrt(std::max(0.0, s2 / m - s.mean * s.mean));
  return s;
}

// Backward of z = (x - mean) / (std + eps) over a masked set. dz holds the
// upstream gradient (read only at masked pixels); the result is added to dx.
template <typename T>
void masked_standardize_backward(const T* x, const std::uint8_t* mask, std::size_t hw,
                                 const T* dz, T* dx, double eps) {
  const PlaneStats s = masked_stats(x, mask, hw);
  if (s.count == 0) return;
  const double m = static_cast<double>(s.count);
  const double denom = s.std + eps;
  const double mu = s.mean;
  auto w = [&](std::size_t i) { return mask ? static_cast<double>(mask[i]) : 1.0; };
  const double sum_dz = lane_sum(hw, [&](std::size_t i) { return w(i) * dz[i]; });
  const double sum_dz_d = lane_sum(hw, [&](std::size_t i) { return w(i) * dz[i] * (x[i] - mu); });
  const double mean_dz = sum_dz / m;
  // d std / d x_j = (x_j - mean) / (m * std); zero when std == 0.
  const double coef = s.std > 0.0 ? sum_dz_d / (denom * denom * m * s.std) : 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const double d = x[i] - mu;
    dx[i] += static_cast<T>(w(i) * ((dz[i] - mean_dz) / denom - coef * d));
  }
}

}  // namespace detail

// (F - mu) / (sigma + eps) per (sample, channel) over H x W.
template <typename T>
Tensor<T> instance_normalize(const Tensor<T>& f, const NormConfig& cfg = {}) {
  require_rank(f, 4, "instance_normalize");
  Tensor<T> out(f.dims());
  const std::size_t HW = f.dim(2) * f.dim(3);
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    for (std::size_t k = 0; k < f.dim(1); ++k) {
      const T* p = f.plane(n, k);
      T* o = out.plane(n, k);
      const auto s = detail::masked_stats<T>(p, nullptr, HW);
      const double denom = s.std + cfg.epsilon;
      for (std::size_t i = 0; i < HW; ++i) o[i] = static_cast<T>((p[i] - s.mean) / denom);
    }
  }
  return out;
}

template <typename T>
Tensor<T> instance_normalize_backward(const Tensor<T>& f, const Tensor<T>& grad_out,
                                      const NormConfig& cfg = {}) {
  require_same_shape(f, grad_out, "instance_normalize_backward");
  Tensor<T> dx(f.dims());
  const std::size_t HW = f.dim(2) * f.dim(3);
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    for (std::size_t k = 0; k < f.dim(1); ++k) {
      detail::masked_standardize_backward(f.plane(n, k), nullptr, HW, grad_out.plane(n, k),
                                          dx.plane(n, k), cfg.epsilon);
    }
  }
  return dx;
}

template <typename T>
void check_regions(const Tensor<T>& f, std::span<const RegionMask> regions, const char* what) {
  require_rank(f, 4, what);
  if (regions.size() != f.dim(0)) {
    throw std::invalid_argument(std::string(what) + ": need one region per sample");
  }
  for (const auto& r : regions) {
    if (r.height != f.dim(2) || r.width != f.dim(3)) {
      throw std::invalid_argument(std::string(what) + ": region size does not match feature map");
    }
  }
}

// Standardizes each channel inside the sample's region using statistics of the
// region only; pixels outside the region are copied unchanged.
template <typename T>
Tensor<T> regional_normalize(const Tensor<T>& f, std::span<const RegionMask> regions,
                             const NormConfig& cfg = {}) {
  check_regions(f, regions, "regional_normalize");
  Tensor<T> out = f;
  const std::size_t HW = f.dim(2) * f.dim(3);
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    const auto* mask = regions[n].inside.data();
    if (regions[n].empty()) {
      throw DegenerateRegionError("regional_normalize: empty region for sample " + std::to_string(n));
    }
    for (std::size_t k = 0; k < f.dim(1); ++k) {
      const T* p = f.plane(n, k);
      T* o = out.plane(n, k);
      const auto s = detail::masked_stats(p, mask, HW);
      const double denom = s.std + cfg.epsilon;
      for (std::size_t i = 0; i < HW; ++i) {
        if (mask[i]) o[i] = static_cast<T>((p[i] - s.mean) / denom);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> regional_normalize_backward(const Tensor<T>& f, std::span<const RegionMask> regions,
                                      const Tensor<T>& grad_out, const NormConfig& cfg = {}) {
  check_regions(f, regions, "regional_normalize_backward");
  require_same_shape(f, grad_out, "regional_normalize_backward");
  Tensor<T> dx(f.dims());
  const std::size_t HW = f.dim(2) * f.dim(3);
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    const auto* mask = regions[n].inside.data();
    for (std::size_t k = 0; k < f.dim(1); ++k) {
      const T* g = grad_out.plane(n, k);
      T* d = dx.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) {
        if (!mask[i]) d[i] += g[i];
      }
      detail::masked_standardize_backward(f.plane(n, k), mask, HW, g, d, cfg.epsilon);
    }
  }
  return dx;
}

namespace detail {

// Covariance of `rows` (each a length-hw signal), 1/hw normalized. Only the
// upper triangle is summed; the lower triangle mirrors it bitwise.
template <typename T>
std::vector<double> row_covariance(std::span<const T* const> rows, std::size_t hw,
                                   std::vector<double>* centered = nullptr) {
  const std::size_t K = rows.size();
  std::vector<double> d(K * hw);
  for (std::size_t i = 0; i < K; ++i) {
    const T* r = rows[i];
    const double mean = lane_sum(hw, [&](std::size_t p) { return static_cast<double>(r[p]); }) /
                        static_cast<double>(hw);
    for (std::size_t p = 0; p < hw; ++p) d[i * hw + p] = rows[i][p] - mean;
  }
  std::vector<double> cov(K * K);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = i; j < K; ++j) {
      const double* a = &d[i * hw];
      const double* b = &d[j * hw];
      const double s = lane_sum(hw, [&](std::size_t p) { return a[p] * b[p]; });
      cov[i * K + j] = cov[j * K + i] = s * inv;
    }
  }
  if (centered) *centered = std::move(d);
  return cov;
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// scale * ||Psi(rows) - I||_1 (entrywise). When grads is non-empty, adds the
// gradient of that quantity w.r.t. each row into grads[i] (subgradient 0 at
// exact zeros).
template <typename T>
double cov_identity_l1(std::span<const T* const> rows, std::size_t hw, std::span<T* const> grads,
                       double scale) {
  const std::size_t K = rows.size();
  std::vector<double> d;
  const auto cov = row_covariance(rows, hw, grads.empty() ? nullptr : &d);
  double loss = 0.0;
  std::vector<double> sgn(K * K);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      const double r = cov[i * K + j] - (i == j ? 1.0 : 0.0);
      loss += std::abs(r);
      sgn[i * K + j] = sign0(r);
    }
  }
  if (!grads.empty()) {
    const double c = 2.0 * scale / static_cast<double>(hw);
    std::vector<double> acc(hw);
    for (std::size_t a = 0; a < K; ++a) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < K; ++j) {
        const double s = sgn[a * K + j];
        if (s == 0.0) continue;
        const double* dj = &d[j * hw];
        for (std::size_t p = 0; p < hw; ++p) acc[p] += s * dj[p];
      }
      for (std::size_t p = 0; p < hw; ++p) grads[a][p] += static_cast<T>(c * acc[p]);
    }
  }
  return scale * loss;
}

}  // namespace detail

template <typename T>
CovMatrix<T> covariance(const Tensor<T>& f_n) {
  require_rank(f_n, 3, "covariance");
  const std::size_t K = f_n.dim(0), HW = f_n.dim(1) * f_n.dim(2);
  std::vector<const T*> rows(K);
  for (std::size_t k = 0; k < K; ++k) rows[k] = f_n.data() + k * HW;
  const auto cov = detail::row_covariance<T>(rows, HW);
  CovMatrix<T> out{K, std::vector<T>(cov.begin(), cov.end())};
  return out;
}

template <typename T>
struct LossAndGrad {
  T loss{};
  Tensor<T> grad;
};

// sum_n ||Psi(F_n) - I||_1 with no batch averaging.
template <typename T>
LossAndGrad<T> iw_loss(const Tensor<T>& f, bool with_grad = true) {
  require_rank(f, 4, "iw_loss");
  const std::size_t N = f.dim(0), K = f.dim(1), HW = f.dim(2) * f.dim(3);
  LossAndGrad<T> out;
  if (with_grad) out.grad = Tensor<T>(f.dims());
  double loss = 0.0;
  std::vector<const T*> rows(K);
  std::vector<T*> grads;
  for (std::size_t n = 0; n < N; ++n) {
    grads.clear();
    for (std::size_t k = 0; k < K; ++k) {
      rows[k] = f.plane(n, k);
      if (with_grad) grads.push_back(out.grad.plane(n, k));
    }
    loss += detail::cov_identity_l1<T>(rows, HW, grads, 1.0);
  }
  out.loss = static_cast<T>(loss);
  return out;
}

// (1/N) sum_n sum_m ||Psi(G_n^m) - I||_1 over `groups` contiguous channel slices.
template <typename T>
LossAndGrad<T> giw_loss(const Tensor<T>& f, std::size_t groups, bool with_grad = true) {
  require_rank(f, 4, "giw_loss");
  const std::size_t N = f.dim(0), K = f.dim(1), HW = f.dim(2) * f.dim(3);
  if (groups == 0 || K % groups != 0) {
    throw std::invalid_argument("giw_loss: channel count " + std::to_string(K) +
                                " is not divisible by group count " + std::to_string(groups));
  }
  const std::size_t per = K / groups;
  LossAndGrad<T> out;
  if (with_grad) out.grad = Tensor<T>(f.dims());
  const double scale = 1.0 / static_cast<double>(N);
  double loss = 0.0;
  std::vector<const T*> rows(per);
  std::vector<T*> grads;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t m = 0; m < groups; ++m) {
      grads.clear();
      for (std::size_t j = 0; j < per; ++j) {
        rows[j] = f.plane(n, m * per + j);
        if (with_grad) grads.push_back(out.grad.plane(n, m * per + j));
      }
      loss += detail::cov_identity_l1<T>(rows, HW, grads, scale);
    }
  }
  out.loss = static_cast<T>(loss);
  return out;
}

}  // namespace semaware
