#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "semaware/conv.hpp"
#include "semaware/norm_whiten.hpp"
#include "semaware/rng.hpp"
#include "semaware/softmax.hpp"
#include "semaware/tensor.hpp"

namespace semaware {

// Clustering setup for the category-region partition.
struct RegionConfig {
  std::size_t k = 5;           // clusters
  std::size_t t = 1;           // top clusters forming the category region
  std::size_t max_iters = 50;  // Lloyd iteration cap

  void validate() const {
    if (t < 1 || t >= k) {
      throw std::invalid_argument("RegionConfig: need 1 <= t < k (t=" + std::to_string(t) +
                                  ", k=" + std::to_string(k) + ")");
    }
    if (max_iters == 0) throw std::invalid_argument("RegionConfig: max_iters must be >= 1");
  }
};

// Parameters of one SAN insertion point. The same layout doubles as the
// gradient container.
template <typename T>
struct SanState {
  std::size_t num_categories = 0;
  std::size_t channels = 0;
  Tensor<T> gamma;                     // {C}, per-category scale shared by the batch
  Tensor<T> beta;                      // {C}
  Tensor<T> cls_weight;                // {C+1, K, 1, 1}; row C is "other"
  Tensor<T> cls_bias;                  // {C+1}
  std::vector<Tensor<T>> cfr_weight;   // C x {1, 3, 3, 3}
  std::vector<Tensor<T>> cfr_bias;     // C x {1}

  static SanState zeros(std::size_t C, std::size_t K) {
    if (C == 0 || K == 0) throw std::invalid_argument("SanState: C and K must be positive");
    SanState s;
    s.num_categories = C;
    s.channels = K;
    s.gamma = Tensor<T>({C});
    s.beta = Tensor<T>({C});
    s.cls_weight = Tensor<T>({C + 1, K, 1, 1});
    s.cls_bias = Tensor<T>({C + 1});
    for (std::size_t c = 0; c < C; ++c) {
      s.cfr_weight.emplace_back(Shape{1, 3, 3, 3});
      s.cfr_bias.emplace_back(Shape{1});
    }
    return s;
  }

  // gamma = 1, beta = 0, classifier ~ U(+-1/sqrt(K)), CFR ~ U(+-0.1), zero biases.
  static SanState init(std::size_t C, std::size_t K, SeededRng& rng) {
    SanState s = zeros(C, K);
    s.gamma.fill(T{1});
    const double a = 1.0 / std::sqrt(static_cast<double>(K));
    s.cls_weight = Tensor<T>::uniform({C + 1, K, 1, 1}, -a, a, rng);
    for (auto& w : s.cfr_weight) w = Tensor<T>::uniform({1, 3, 3, 3}, -0.1, 0.1, rng);
    return s;
  }

  SanState zeros_like() const { return zeros(num_categories, channels); }

  // The C x K block of classifier weights for the aligned categories.
  Tensor<T> classifier_block() const {
    Tensor<T> w({num_categories, channels});
    std::copy_n(cls_weight.data(), num_categories * channels, w.data());
    return w;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> params() {
    std::vector<std::pair<std::string, Tensor<T>*>> p{
        {"gamma", &gamma}, {"beta", &beta}, {"cls_weight", &cls_weight}, {"cls_bias", &cls_bias}};
    for (std::size_t c = 0; c < cfr_weight.size(); ++c) {
      p.emplace_back("cfr_weight." + std::to_string(c), &cfr_weight[c]);
      p.emplace_back("cfr_bias." + std::to_string(c), &cfr_bias[c]);
    }
    return p;
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> params() const {
    auto p = const_cast<SanState*>(this)->params();
    return {p.begin(), p.end()};
  }
};

struct SanOptions {
  NormConfig norm;
  RegionConfig region;
  bool cfr = true;
};

enum class Mode { train, infer };

// Maps every label >= C to the "other" id C.
inline LabelMap remap_labels(const LabelMap& labels, std::size_t C) {
  LabelMap out = labels;
  for (auto& v : out.values()) {
    if (v < 0) throw std::invalid_argument("negative label " + std::to_string(v));
    if (static_cast<std::size_t>(v) > C) v = static_cast<std::int32_t>(C);
  }
  return out;
}

template <typename T>
struct MaskPrediction {
  Tensor<T> logits;  // {N, C+1, H, W}
  Tensor<T> masks;   // softmax of logits
};

template <typename T>
MaskPrediction<T> predict_masks(const Tensor<T>& f, const SanState<T>& state) {
  require_rank(f, 4, "predict_masks");
  if (f.dim(1) != state.channels) {
    throw std::invalid_argument("predict_masks: feature has " + std::to_string(f.dim(1)) +
                                " channels, classifier expects " + std::to_string(state.channels));
  }
  MaskPrediction<T> out;
  out.logits = conv2d(f, state.cls_weight, state.cls_bias);
  out.masks = softmax_channels(out.logits);
  return out;
}

// F'_c = F (x) M_c, with M_c broadcast over channels.
template <typename T>
Tensor<T> mask_branch(const Tensor<T>& f, const Tensor<T>& masks, std::size_t c) {
  require_rank(masks, 4, "mask_branch");
  if (c + 1 >= masks.dim(1)) throw std::invalid_argument("mask_branch: category out of range");
  Tensor<T> m({masks.dim(0), 1, masks.dim(2), masks.dim(3)});
  const std::size_t HW = masks.dim(2) * masks.dim(3);
  for (std::size_t n = 0; n < masks.dim(0); ++n) std::copy_n(masks.plane(n, c), HW, m.plane(n, 0));
  return ew(f, m, BinaryOp::mul);
}

namespace detail {

template <typename T>
Tensor<T> cfr_input(const Tensor<T>& fp, const Tensor<T>& mask_c) {
  const auto mx = pool_channels(fp, ChannelPool::max);
  const auto av = pool_channels(fp, ChannelPool::avg);
  const std::size_t N = fp.dim(0), HW = fp.dim(2) * fp.dim(3);
  Tensor<T> in({N, 3, fp.dim(2), fp.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(mx.plane(n, 0), HW, in.plane(n, 0));
    std::copy_n(av.plane(n, 0), HW, in.plane(n, 1));
    std::copy_n(mask_c.plane(n, 0), HW, in.plane(n, 2));
  }
  return in;
}

}  // namespace detail

// F''_c = Sigm(conv3x3([max_ch F'; avg_ch F'; M_c])) (x) F'_c.
template <typename T>
Tensor<T> cfr_refine(const Tensor<T>& fp, const Tensor<T>& mask_c, const Tensor<T>& weight,
                     const Tensor<T>& bias) {
  require_rank(fp, 4, "cfr_refine");
  const auto gate = ew(conv2d(detail::cfr_input(fp, mask_c), weight, bias), UnaryOp::sigmoid);
  return ew(fp, gate, BinaryOp::mul);
}

template <typename T>
struct CfrGrads {
  Tensor<T> fp;
  Tensor<T> mask;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
CfrGrads<T> cfr_refine_backward(const Tensor<T>& fp, const Tensor<T>& mask_c, const Tensor<T>& weight,
                                const Tensor<T>& bias, const Tensor<T>& grad_out) {
  const std::size_t N = fp.dim(0), K = fp.dim(1), HW = fp.dim(2) * fp.dim(3);
  const auto in = detail::cfr_input(fp, mask_c);
  const auto gate = ew(conv2d(in, weight, bias), UnaryOp::sigmoid);
  CfrGrads<T> g;
  g.fp = ew(grad_out, gate, BinaryOp::mul);
  Tensor<T> dgate({N, 1, fp.dim(2), fp.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    T* dg = dgate.plane(n, 0);
    const T* gt = gate.plane(n, 0);
    for (std::size_t k = 0; k < K; ++k) {
      const T* go = grad_out.plane(n, k);
      const T* x = fp.plane(n, k);
      for (std::size_t p = 0; p < HW; ++p) dg[p] += go[p] * x[p];
    }
    for (std::size_t p = 0; p < HW; ++p) dg[p] *= gt[p] * (T{1} - gt[p]);
  }
  auto cg = conv2d_backward(in, weight, dgate);
  g.weight = std::move(cg.weight);
  g.bias = std::move(cg.bias);
  g.mask = Tensor<T>(mask_c.dims());
  for (std::size_t n = 0; n < N; ++n) {
    const T* dmax = cg.input.plane(n, 0);
    const T* davg = cg.input.plane(n, 1);
    std::copy_n(cg.input.plane(n, 2), HW, g.mask.plane(n, 0));
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k) {
        if (fp.plane(n, k)[p] > fp.plane(n, best)[p]) best = k;
      }
      g.fp.plane(n, best)[p] += dmax[p];
      const T a = davg[p] / static_cast<T>(K);
      for (std::size_t k = 0; k < K; ++k) g.fp.plane(n, k)[p] += a;
    }
  }
  return g;
}

namespace detail {

// Ascending copy of the values as doubles. Floats go through an LSD radix
// sort on order-preserving keys.
inline std::vector<double> sorted_values(std::span<const float> values) {
  const std::size_t n = values.size();
  std::vector<std::uint32_t> keys(n), tmp(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], sizeof u);
    keys[i] = (u & 0x80000000u) ? ~u : (u | 0x80000000u);
  }
  // Three 11-bit digits, histograms gathered in one pass.
  std::vector<std::uint32_t> count(3 * 2048, 0);
  for (auto k : keys) {
    ++count[k & 0x7FFu];
    ++count[2048 + ((k >> 11) & 0x7FFu)];
    ++count[4096 + (k >> 22)];
  }
  for (int d = 0; d < 3; ++d) {
    std::uint32_t* c = count.data() + 2048 * d;
    std::uint32_t run = 0;
    for (std::size_t b = 0; b < 2048; ++b) {
      const std::uint32_t v = c[b];
      c[b] = run;
      run += v;
    }
    const int shift = 11 * d;
    for (auto k : keys) tmp[c[(k >> shift) & 0x7FFu]++] = k;
    keys.swap(tmp);
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = (keys[i] & 0x80000000u) ? (keys[i] & 0x7FFFFFFFu) : ~keys[i];
    float f;
    std::memcpy(&f, &u, sizeof f);
    out[i] = f;
  }
  return out;
}

inline std::vector<double> sorted_values(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

struct KMeans1D {
  std::vector<std::size_t> assignment;  // cluster per input value, indexes into centers
  std::vector<double> centers;          // ascending; empty clusters removed
};

// Lloyd's algorithm on scalars. Centers start at the (i + 0.5)/k quantiles of
// the distinct sorted values; clusters that become empty are dropped, so fewer than k
// distinct values yield fewer than k clusters.
template <typename T>
KMeans1D kmeans_1d(std::span<const T> values, std::size_t k, std::size_t max_iters = 50) {
  const std::size_t n = values.size();
  if (k == 0) throw std::invalid_argument("kmeans_1d: k must be >= 1");
  if (n < k) {
    throw std::invalid_argument("kmeans_1d: need at least k=" + std::to_string(k) + " values, got " +
                                std::to_string(n));
  }
  std::vector<double> sorted = detail::sorted_values(values), prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sorted[i];

  // Quantiles are taken over the distinct values so that heavy ties do not
  // collapse several initial centers onto one value.
  std::vector<double> distinct;
  for (double v : sorted) {
    if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
  }
  const std::size_t d = distinct.size();
  std::vector<double> centers;
  for (std::size_t i = 0; i < std::min(k, d); ++i) {
    const auto q = static_cast<std::size_t>((static_cast<double>(i) + 0.5) / static_cast<double>(std::min(k, d)) *
                                            static_cast<double>(d));
    const double c = distinct[std::min(q, d - 1)];
    if (centers.empty() || c != centers.back()) centers.push_back(c);
  }

  // Segment boundaries in sorted order: cluster j covers [bounds[j], bounds[j+1]).
  // A value exactly at a midpoint goes to the lower cluster.
  auto assign = [&](const std::vector<double>& cs) {
    std::vector<std::size_t> bounds{0};
    for (std::size_t j = 0; j + 1 < cs.size(); ++j) {
      const double mid = 0.5 * (cs[j] + cs[j + 1]);
      const auto it = std::upper_bound(sorted.begin() + static_cast<std::ptrdiff_t>(bounds.back()),
                                       sorted.end(), mid);
      bounds.push_back(static_cast<std::size_t>(it - sorted.begin()));
    }
    bounds.push_back(n);
    return bounds;
  };
  auto update = [&](const std::vector<std::size_t>& bounds, std::vector<std::size_t>* kept) {
    std::vector<double> cs;
    if (kept) kept->assign({0});
    for (std::size_t j = 0; j + 1 < bounds.size(); ++j) {
      const std::size_t lo = bounds[j], hi = bounds[j + 1];
      if (hi == lo) continue;
      cs.push_back((prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo));
      if (kept) kept->push_back(hi);
    }
    return cs;
  };

  for (std::size_t it = 0; it < max_iters; ++it) {
    auto next = update(assign(centers), nullptr);
    if (next == centers) break;
    centers = std::move(next);
  }

  // Final assignment by midpoint thresholds, which reproduces the segments of
  // assign(); empty segments are skipped in the numbering.
  const auto bounds = assign(centers);
  std::vector<double> mids;
  for (std::size_t j = 0; j + 1 < centers.size(); ++j) mids.push_back(0.5 * (centers[j] + centers[j + 1]));
  std::vector<std::size_t> renumber(centers.size(), 0);
  std::size_t kept = 0;
  for (std::size_t j = 0; j < centers.size(); ++j) {
    renumber[j] = kept;
    if (bounds[j + 1] > bounds[j]) ++kept;
  }
  KMeans1D out;
  std::vector<std::size_t> kept_bounds;
  out.centers = update(bounds, &kept_bounds);
  out.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(values[i]);
    std::size_t j = 0;
    for (double mid : mids) j += v > mid;
    out.assignment[i] = renumber[j];
  }
  return out;
}

template <typename T>
KMeans1D kmeans_1d(std::span<const T> values, const RegionConfig& cfg) {
  return kmeans_1d(values, cfg.k, cfg.max_iters);
}

// Pixels in the t highest-centered clusters of a scalar H x W map. A map with
// no more than t effective clusters (e.g. constant) yields the full image.
template <typename T>
RegionMask partition_map(std::span<const T> map, std::size_t H, std::size_t W, const RegionConfig& cfg) {
  cfg.validate();
  const auto km = kmeans_1d(map, cfg);
  const std::size_t m = km.centers.size();
  if (m <= cfg.t) return RegionMask::full(H, W);
  RegionMask r(H, W);
  for (std::size_t i = 0; i < map.size(); ++i) r.inside[i] = km.assignment[i] >= m - cfg.t ? 1 : 0;
  return r;
}

// Channel-average a refined branch and split it into a category region per sample.
template <typename T>
std::vector<RegionMask> partition_region(const Tensor<T>& fpp_c, const RegionConfig& cfg) {
  require_rank(fpp_c, 4, "partition_region");
  const auto avg = pool_channels(fpp_c, ChannelPool::avg);
  const std::size_t H = fpp_c.dim(2), W = fpp_c.dim(3);
  std::vector<RegionMask> out;
  for (std::size_t n = 0; n < fpp_c.dim(0); ++n) {
    out.push_back(partition_map(std::span<const T>(avg.plane(n, 0), H * W), H, W, cfg));
  }
  return out;
}

// Intermediates of one SAN forward pass, kept for the backward pass.
template <typename T>
struct SanCache {
  Tensor<T> logits;    // {N, C+1, H, W}
  Tensor<T> masks;     // softmax(logits)
  Tensor<T> chan_max;  // {N, 1, H, W}, max over channels of F
  Tensor<T> chan_avg;  // {N, 1, H, W}
  std::vector<std::uint32_t> argmax;       // channel of chan_max per pixel
  std::vector<Tensor<T>> cfr_in;           // per category {N, 3, H, W}
  std::vector<Tensor<T>> gate;             // per category {N, 1, H, W}
  std::vector<Tensor<T>> scale;            // per category gate * mask, {N, 1, H, W}
  std::vector<std::vector<RegionMask>> regions;  // [category][sample]
  std::vector<detail::PlaneStats> rn_stats;      // [(c * N + n) * K + k], of s_c * F_k in region_c
};

template <typename T>
struct SanForward {
  Tensor<T> output;
  SanCache<T> cache;
};

using SanRegions = std::vector<std::vector<RegionMask>>;

// Category-aligned features:
//   out = sum_c B_c + M_other (x) F,
//   B_c = RN(F''_c, region_c) * gamma_c + beta_c inside region_c, F''_c outside,
// with F''_c = CFR(F (x) M_c). The channel pools commute with the positive
// mask, so F''_c = s_c (x) F for the per-pixel scale s_c = gate_c * M_c and
// no per-category copy of F is materialized. `fixed_regions` (when given)
// replaces the k-means partition.
template <typename T>
SanForward<T> san_forward(const Tensor<T>& f, const SanState<T>& state, const SanOptions& opts,
                          Mode mode = Mode::train, const SanRegions* fixed_regions = nullptr) {
  (void)mode;  // SAN runs identically for training and inference
  const std::size_t C = state.num_categories;
  auto pred = predict_masks(f, state);
  const std::size_t N = f.dim(0), K = f.dim(1), H = f.dim(2), W = f.dim(3), HW = H * W;
  SanForward<T> res;
  auto& cache = res.cache;
  cache.logits = std::move(pred.logits);
  cache.masks = std::move(pred.masks);
  cache.chan_max = Tensor<T>({N, 1, H, W});
  cache.chan_avg = Tensor<T>({N, 1, H, W});
  cache.argmax.assign(N * HW, 0);
  for (std::size_t n = 0; n < N; ++n) {
    T* mx = cache.chan_max.plane(n, 0);
    T* av = cache.chan_avg.plane(n, 0);
    std::uint32_t* am = cache.argmax.data() + n * HW;
    std::copy_n(f.plane(n, 0), HW, mx);
    std::copy_n(f.plane(n, 0), HW, av);
    for (std::size_t k = 1; k < K; ++k) {
      const T* p = f.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) {
        av[i] += p[i];
        if (p[i] > mx[i]) {
          mx[i] = p[i];
          am[i] = static_cast<std::uint32_t>(k);
        }
      }
    }
    const T inv = T{1} / static_cast<T>(K);
    for (std::size_t i = 0; i < HW; ++i) av[i] *= inv;
  }

  if (fixed_regions && fixed_regions->size() != C) {
    throw std::invalid_argument("san_forward: fixed regions must cover every category");
  }
  cache.regions.resize(C);
  std::vector<T> avg_map(HW);
  for (std::size_t c = 0; c < C; ++c) {
    Tensor<T> s({N, 1, H, W});
    if (opts.cfr) {
      Tensor<T> in({N, 3, H, W});
      for (std::size_t n = 0; n < N; ++n) {
        const T* m = cache.masks.plane(n, c);
        const T* mx = cache.chan_max.plane(n, 0);
        const T* av = cache.chan_avg.plane(n, 0);
        T* i0 = in.plane(n, 0);
        T* i1 = in.plane(n, 1);
        T* i2 = in.plane(n, 2);
        for (std::size_t i = 0; i < HW; ++i) {
          i0[i] = m[i] * mx[i];
          i1[i] = m[i] * av[i];
          i2[i] = m[i];
        }
      }
      auto gate = ew(conv2d(in, state.cfr_weight[c], state.cfr_bias[c]), UnaryOp::sigmoid);
      for (std::size_t n = 0; n < N; ++n) {
        const T* m = cache.masks.plane(n, c);
        const T* g = gate.plane(n, 0);
        T* sp = s.plane(n, 0);
        for (std::size_t i = 0; i < HW; ++i) sp[i] = g[i] * m[i];
      }
      cache.cfr_in.push_back(std::move(in));
      cache.gate.push_back(std::move(gate));
    } else {
      for (std::size_t n = 0; n < N; ++n) std::copy_n(cache.masks.plane(n, c), HW, s.plane(n, 0));
    }

    auto& regions = cache.regions[c];
    if (fixed_regions) {
      regions = (*fixed_regions)[c];
      check_regions(f, std::span<const RegionMask>(regions), "san_forward");
    } else {
      for (std::size_t n = 0; n < N; ++n) {
        const T* sp = s.plane(n, 0);
        const T* av = cache.chan_avg.plane(n, 0);
        for (std::size_t i = 0; i < HW; ++i) avg_map[i] = sp[i] * av[i];
        regions.push_back(partition_map(std::span<const T>(avg_map), H, W, opts.region));
      }
    }
    for (auto& r : regions) {
      if (r.empty()) r = RegionMask::full(H, W);
    }
    cache.scale.push_back(std::move(s));
  }

  // Assemble the output, categories in ascending order.
  res.output = Tensor<T>(f.dims());
  cache.rn_stats.resize(C * N * K);
  std::vector<T> in(HW);
  for (std::size_t n = 0; n < N; ++n) {
    const T* m_other = cache.masks.plane(n, C);
    for (std::size_t k = 0; k < K; ++k) {
      const T* fp = f.plane(n, k);
      T* o = res.output.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) o[i] = fp[i] * m_other[i];
    }
    for (std::size_t c = 0; c < C; ++c) {
      const T* sp = cache.scale[c].plane(n, 0);
      const auto& inside = cache.regions[c][n].inside;
      for (std::size_t i = 0; i < HW; ++i) in[i] = static_cast<T>(inside[i]);
      const std::size_t count = detail::mask_count(inside.data(), HW);
      const double m = static_cast<double>(count);
      for (std::size_t k = 0; k < K; ++k) {
        const T* fp = f.plane(n, k);
        T* o = res.output.plane(n, k);
        auto& st = cache.rn_stats[(c * N + n) * K + k];
        st.count = count;
        const auto [s1, s2] = detail::lane_sum2(
            HW, [&](std::size_t i) { return static_cast<double>(in[i]) * static_cast<T>(sp[i] * fp[i]); },
            [&](std::size_t i) {
              const double x = static_cast<T>(sp[i] * fp[i]);
              return static_cast<double>(in[i]) * x * x;
            });
        st.mean = s1 / m;
        st.std = std::sqrt(std::max(0.0, s2 / m - st.mean * st.mean));
        const double a = static_cast<double>(state.gamma[c]) / (st.std + opts.norm.epsilon);
        const T at = static_cast<T>(a), bt = static_cast<T>(static_cast<double>(state.beta[c]) - a * st.mean);
        for (std::size_t i = 0; i < HW; ++i) {
          const T x = sp[i] * fp[i];
          o[i] += in[i] * (at * x + bt) + (T{1} - in[i]) * x;
        }
      }
    }
  }
  return res;
}

template <typename T>
struct SanBackward {
  Tensor<T> input;     // dL/dF
  SanState<T> params;  // dL/d(state)
};

// Backward of san_forward. `grad_logits_extra` (optional) is added to the
// gradient reaching the classifier logits, e.g. from the mask CE term.
template <typename T>
SanBackward<T> san_backward(const Tensor<T>& f, const SanState<T>& state, const SanOptions& opts,
                            const SanCache<T>& cache, const Tensor<T>& grad_out,
                            const Tensor<T>& grad_logits_extra = {}) {
  require_same_shape(f, grad_out, "san_backward");
  const std::size_t C = state.num_categories;
  const std::size_t N = f.dim(0), K = f.dim(1), H = f.dim(2), W = f.dim(3), HW = H * W;
  SanBackward<T> g;
  g.input = Tensor<T>(f.dims());
  g.params = state.zeros_like();
  Tensor<T> dmasks(cache.masks.dims());
  Tensor<T> dmax({N, 1, H, W}), davg({N, 1, H, W});

  std::vector<Tensor<T>> dscale;
  for (std::size_t c = 0; c < C; ++c) dscale.emplace_back(Shape{N, 1, H, W});

  std::vector<T> in(HW);
  for (std::size_t n = 0; n < N; ++n) {
    const T* m_other = cache.masks.plane(n, C);
    T* dm_other = dmasks.plane(n, C);
    for (std::size_t k = 0; k < K; ++k) {
      const T* fp = f.plane(n, k);
      const T* go = grad_out.plane(n, k);
      T* gi = g.input.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) {
        dm_other[i] += go[i] * fp[i];
        gi[i] += go[i] * m_other[i];
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      const T* sp = cache.scale[c].plane(n, 0);
      T* ds = dscale[c].plane(n, 0);
      const auto& inside = cache.regions[c][n].inside;
      for (std::size_t i = 0; i < HW; ++i) in[i] = static_cast<T>(inside[i]);
      const double gamma = state.gamma[c];
      double dgamma = 0.0, dbeta = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const T* fp = f.plane(n, k);
        const T* go = grad_out.plane(n, k);
        T* gi = g.input.plane(n, k);
        const auto& st = cache.rn_stats[(c * N + n) * K + k];
        const double mu = st.mean, denom = st.std + opts.norm.epsilon, m = static_cast<double>(st.count);
        // Inside the region z = (x - mu) / denom and dL/dz = gamma * go.
        const auto [s1, sx] = detail::lane_sum2(
            HW, [&](std::size_t i) { return static_cast<double>(in[i]) * go[i]; },
            [&](std::size_t i) { return static_cast<double>(in[i]) * go[i] * static_cast<T>(sp[i] * fp[i]); });
        const double s2 = sx - mu * s1;
        dgamma += s2 / denom;
        dbeta += s1;
        const double mean_dz = gamma * s1 / m;
        const double coef = st.std > 0.0 ? gamma * s2 / (denom * denom * m * st.std) : 0.0;
        const T c1 = static_cast<T>(gamma / denom), c2 = static_cast<T>(mean_dz / denom);
        const T c3 = static_cast<T>(coef), mut = static_cast<T>(mu);
        for (std::size_t i = 0; i < HW; ++i) {
          const T x = sp[i] * fp[i];
          const T dx = in[i] * (c1 * go[i] - c2 - c3 * (x - mut)) + (T{1} - in[i]) * go[i];
          gi[i] += dx * sp[i];
          ds[i] += dx * fp[i];
        }
      }
      g.params.gamma[c] += static_cast<T>(dgamma);
      g.params.beta[c] += static_cast<T>(dbeta);
    }
  }

  for (std::size_t c = 0; c < C; ++c) {
    if (!opts.cfr) {
      for (std::size_t n = 0; n < N; ++n) {
        const T* ds = dscale[c].plane(n, 0);
        T* dm = dmasks.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) dm[i] += ds[i];
      }
      continue;
    }
    Tensor<T> dpre({N, 1, H, W});
    for (std::size_t n = 0; n < N; ++n) {
      const T* ds = dscale[c].plane(n, 0);
      const T* gt = cache.gate[c].plane(n, 0);
      const T* m = cache.masks.plane(n, c);
      T* dm = dmasks.plane(n, c);
      T* dp = dpre.plane(n, 0);
      for (std::size_t i = 0; i < HW; ++i) {
        dm[i] += ds[i] * gt[i];
        dp[i] = ds[i] * m[i] * gt[i] * (T{1} - gt[i]);
      }
    }
    auto cg = conv2d_backward(cache.cfr_in[c], state.cfr_weight[c], dpre);
    g.params.cfr_weight[c] = std::move(cg.weight);
    g.params.cfr_bias[c] = std::move(cg.bias);
    for (std::size_t n = 0; n < N; ++n) {
      const T* d0 = cg.input.plane(n, 0);
      const T* d1 = cg.input.plane(n, 1);
      const T* d2 = cg.input.plane(n, 2);
      const T* m = cache.masks.plane(n, c);
      const T* mx = cache.chan_max.plane(n, 0);
      const T* av = cache.chan_avg.plane(n, 0);
      T* dm = dmasks.plane(n, c);
      T* dmx = dmax.plane(n, 0);
      T* dav = davg.plane(n, 0);
      for (std::size_t i = 0; i < HW; ++i) {
        dm[i] += d0[i] * mx[i] + d1[i] * av[i] + d2[i];
        dmx[i] += d0[i] * m[i];
        dav[i] += d1[i] * m[i];
      }
    }
  }

  const T invK = T{1} / static_cast<T>(K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* dmx = dmax.plane(n, 0);
    const T* dav = davg.plane(n, 0);
    const std::uint32_t* am = cache.argmax.data() + n * HW;
    for (std::size_t k = 0; k < K; ++k) {
      T* gi = g.input.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) gi[i] += dav[i] * invK;
    }
    for (std::size_t i = 0; i < HW; ++i) g.input.plane(n, am[i])[i] += dmx[i];
  }

  auto dlogits = softmax_channels_backward(cache.masks, dmasks);
  if (!grad_logits_extra.empty()) axpy(T{1}, grad_logits_extra, dlogits);
  auto cls = conv2d_backward(f, state.cls_weight, dlogits);
  axpy(T{1}, cls.input, g.input);
  g.params.cls_weight = std::move(cls.weight);
  g.params.cls_bias = std::move(cls.bias);
  return g;
}

// Label-driven target: pixels of aligned category c are standardized with the
// statistics of that category's ground-truth region (per sample and channel),
// then scaled by gamma_c and shifted by beta_c. "Other" pixels copy F.
template <typename T>
Tensor<T> objective_features(const Tensor<T>& f, const LabelMap& labels, const SanState<T>& state,
                             const SanOptions& opts) {
  require_rank(f, 4, "objective_features");
  const std::size_t C = state.num_categories;
  const std::size_t N = f.dim(0), K = f.dim(1), HW = f.dim(2) * f.dim(3);
  const auto lab = remap_labels(labels, C);
  Tensor<T> out = f;
  std::vector<T> region(HW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < HW; ++i) {
        const bool inside = lab[n * HW + i] == static_cast<std::int32_t>(c);
        region[i] = inside ? T{1} : T{0};
        count += inside;
      }
      if (count == 0) continue;
      for (std::size_t k = 0; k < K; ++k) {
        const T* p = f.plane(n, k);
        T* o = out.plane(n, k);
        const auto st = detail::weighted_stats(p, region.data(), count, HW);
        const double a = static_cast<double>(state.gamma[c]) / (st.std + opts.norm.epsilon);
        const T at = static_cast<T>(a), bt = static_cast<T>(static_cast<double>(state.beta[c]) - a * st.mean);
        for (std::size_t i = 0; i < HW; ++i) o[i] = region[i] * (at * p[i] + bt) + (T{1} - region[i]) * o[i];
      }
    }
  }
  return out;
}

template <typename T>
struct ObjectiveBackward {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
ObjectiveBackward<T> objective_features_backward(const Tensor<T>& f, const LabelMap& labels,
                                                 const SanState<T>& state, const SanOptions& opts,
                                                 const Tensor<T>& grad_obj) {
  const std::size_t C = state.num_categories;
  const std::size_t N = f.dim(0), K = f.dim(1), HW = f.dim(2) * f.dim(3);
  const auto lab = remap_labels(labels, C);
  ObjectiveBackward<T> g{Tensor<T>(f.dims()), Tensor<T>({C}), Tensor<T>({C})};
  std::vector<T> region(HW);
  for (std::size_t n = 0; n < N; ++n) {
    const std::int32_t* ln = lab.data() + n * HW;
    for (std::size_t k = 0; k < K; ++k) {
      const T* go = grad_obj.plane(n, k);
      T* gi = g.input.plane(n, k);
      for (std::size_t i = 0; i < HW; ++i) gi[i] += ln[i] >= static_cast<std::int32_t>(C) ? go[i] : T{0};
    }
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < HW; ++i) {
        const bool inside = ln[i] == static_cast<std::int32_t>(c);
        region[i] = inside ? T{1} : T{0};
        count += inside;
      }
      if (count == 0) continue;
      const double gamma = state.gamma[c], m = static_cast<double>(count);
      double dgamma = 0.0, dbeta = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const T* p = f.plane(n, k);
        const T* go = grad_obj.plane(n, k);
        T* gi = g.input.plane(n, k);
        const auto st = detail::weighted_stats(p, region.data(), count, HW);
        const double mu = st.mean, denom = st.std + opts.norm.epsilon;
        const auto [s1, sx] = detail::lane_sum2(
            HW, [&](std::size_t i) { return static_cast<double>(region[i]) * go[i]; },
            [&](std::size_t i) { return static_cast<double>(region[i]) * go[i] * p[i]; });
        const double s2 = sx - mu * s1;
        dgamma += s2 / denom;
        dbeta += s1;
        const double mean_dz = gamma * s1 / m;
        const double coef = st.std > 0.0 ? gamma * s2 / (denom * denom * m * st.std) : 0.0;
        const T c1 = static_cast<T>(gamma / denom), c2 = static_cast<T>(mean_dz / denom);
        const T c3 = static_cast<T>(coef), mut = static_cast<T>(mu);
        for (std::size_t i = 0; i < HW; ++i) gi[i] += region[i] * (c1 * go[i] - c2 - c3 * (p[i] - mut));
      }
      g.gamma[c] += static_cast<T>(dgamma);
      g.beta[c] += static_cast<T>(dbeta);
    }
  }
  return g;
}

template <typename T>
struct SanLoss {
  T loss{};
  T ce{};
  T l1{};
  Tensor<T> grad_output;     // d/d F~
  Tensor<T> grad_objective;  // d/d F_obj
  Tensor<T> grad_logits;     // d/d mask logits
};

// CE(mask logits, labels remapped to C+1 ids; pixel mean) plus the mean
// absolute difference |F~ - F_obj| over all channels of the pixels of
// aligned categories.
template <typename T>
SanLoss<T> san_loss(const Tensor<T>& out, const Tensor<T>& objective, const Tensor<T>& logits,
                    const LabelMap& labels) {
  require_same_shape(out, objective, "san_loss");
  const std::size_t C = logits.dim(1) - 1;
  const auto lab = remap_labels(labels, C);
  auto ce = softmax_cross_entropy(logits, lab);
  SanLoss<T> res;
  res.ce = ce.loss;
  res.grad_logits = std::move(ce.grad);
  res.grad_output = Tensor<T>(out.dims());
  res.grad_objective = Tensor<T>(out.dims());
  const std::size_t N = out.dim(0), K = out.dim(1), HW = out.dim(2) * out.dim(3);
  std::vector<T> valid(N * HW);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < N * HW; ++i) {
    const bool v = lab[i] < static_cast<std::int32_t>(C);
    valid[i] = v ? T{1} : T{0};
    counted += v;
  }
  double l1 = 0.0;
  if (counted > 0) {
    const double inv = 1.0 / static_cast<double>(counted * K);
    const T step = static_cast<T>(inv);
    for (std::size_t n = 0; n < N; ++n) {
      const T* vn = valid.data() + n * HW;
      for (std::size_t k = 0; k < K; ++k) {
        const T* a = out.plane(n, k);
        const T* b = objective.plane(n, k);
        T* ga = res.grad_output.plane(n, k);
        T* gb = res.grad_objective.plane(n, k);
        l1 += detail::lane_sum(HW, [&](std::size_t i) {
          return static_cast<double>(vn[i]) * std::abs(static_cast<double>(a[i]) - b[i]);
        });
        for (std::size_t i = 0; i < HW; ++i) {
          const T s = vn[i] * step * ((a[i] > b[i]) ? T{1} : (a[i] < b[i] ? T{-1} : T{0}));
          ga[i] = s;
          gb[i] = -s;
        }
      }
    }
    l1 *= inv;
  }
  res.l1 = static_cast<T>(l1);
  res.loss = res.ce + res.l1;
  return res;
}

}  // namespace semaware
