#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "semaware/norm_whiten.hpp"
#include "semaware/tensor.hpp"

namespace semaware {

// For each category c the K/C channels with the largest |w_c|, in descending
// |w| order, together with the signed weights at those channels.
template <typename T>
struct ChannelIndexMatrix {
  std::size_t categories = 0;
  std::size_t per_category = 0;        // K / C, also the number of groups
  std::vector<std::size_t> index;      // categories x per_category
  std::vector<T> weight;               // matching classifier weights

  std::size_t at(std::size_t c, std::size_t m) const { return index[c * per_category + m]; }
  T weight_at(std::size_t c, std::size_t m) const { return weight[c * per_category + m]; }
};

// classifier_weights is C x K. Ties in |w| go to the lower channel index.
template <typename T>
ChannelIndexMatrix<T> select_channel_indexes(const Tensor<T>& classifier_weights) {
  require_rank(classifier_weights, 2, "select_channel_indexes");
  const std::size_t C = classifier_weights.dim(0), K = classifier_weights.dim(1);
  if (K % C != 0) {
    throw std::invalid_argument("select_channel_indexes: K=" + std::to_string(K) +
                                " is not divisible by C=" + std::to_string(C));
  }
  ChannelIndexMatrix<T> idx;
  idx.categories = C;
  idx.per_category = K / C;
  std::vector<std::size_t> order(K);
  for (std::size_t c = 0; c < C; ++c) {
    const T* w = classifier_weights.data() + c * K;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
    for (std::size_t m = 0; m < idx.per_category; ++m) {
      idx.index.push_back(order[m]);
      idx.weight.push_back(w[order[m]]);
    }
  }
  return idx;
}

// Same selection, weights re-read from a (possibly updated) C x K block.
template <typename T>
ChannelIndexMatrix<T> with_weights(const ChannelIndexMatrix<T>& idx, const Tensor<T>& classifier_weights) {
  require_rank(classifier_weights, 2, "with_weights");
  const std::size_t K = classifier_weights.dim(1);
  ChannelIndexMatrix<T> out = idx;
  for (std::size_t c = 0; c < idx.categories; ++c)
    for (std::size_t m = 0; m < idx.per_category; ++m)
      out.weight[c * idx.per_category + m] = classifier_weights[c * K + idx.at(c, m)];
  return out;
}

template <typename T>
void check_index_matrix(const Tensor<T>& f, const ChannelIndexMatrix<T>& idx, const char* what) {
  require_rank(f, 4, what);
  if (idx.categories * idx.per_category != f.dim(1)) {
    throw std::invalid_argument(std::string(what) + ": index matrix does not match " +
                                std::to_string(f.dim(1)) + " channels");
  }
  for (auto i : idx.index) {
    if (i >= f.dim(1)) throw std::invalid_argument(std::string(what) + ": channel index out of range");
  }
}

// Group m stacks F_{I(c,m)} * w_c^{I(c,m)} for c = 0..C-1. A channel chosen by
// several categories appears once per choice.
template <typename T>
std::vector<Tensor<T>> build_groups(const Tensor<T>& f, const ChannelIndexMatrix<T>& idx) {
  check_index_matrix(f, idx, "build_groups");
  const std::size_t N = f.dim(0), C = idx.categories, HW = f.dim(2) * f.dim(3);
  std::vector<Tensor<T>> groups;
  for (std::size_t m = 0; m < idx.per_category; ++m) {
    Tensor<T> g({N, C, f.dim(2), f.dim(3)});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = f.plane(n, idx.at(c, m));
        const T w = idx.weight_at(c, m);
        T* dst = g.plane(n, c);
        for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] * w;
      }
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

template <typename T>
struct SawLoss {
  T loss{};
  Tensor<T> grad_features;  // same shape as the features
  Tensor<T> grad_weights;   // C x K, gradient w.r.t. the classifier block
};

// (1/N) sum_n sum_m ||Psi(G_n^m) - I||_1 over the weighted groups.
template <typename T>
SawLoss<T> saw_loss(const Tensor<T>& f, const ChannelIndexMatrix<T>& idx, bool with_grad = true) {
  check_index_matrix(f, idx, "saw_loss");
  const std::size_t N = f.dim(0), K = f.dim(1), C = idx.categories, HW = f.dim(2) * f.dim(3);
  SawLoss<T> res;
  if (with_grad) {
    res.grad_features = Tensor<T>(f.dims());
    res.grad_weights = Tensor<T>({C, K});
  }
  const double scale = 1.0 / static_cast<double>(N);
  std::vector<T> rows(C * HW), grows(C * HW);
  std::vector<const T*> row_ptrs(C);
  std::vector<T*> grad_ptrs;
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t m = 0; m < idx.per_category; ++m) {
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = f.plane(n, idx.at(c, m));
        const T w = idx.weight_at(c, m);
        for (std::size_t i = 0; i < HW; ++i) rows[c * HW + i] = src[i] * w;
        row_ptrs[c] = rows.data() + c * HW;
      }
      grad_ptrs.clear();
      if (with_grad) {
        std::fill(grows.begin(), grows.end(), T{0});
        for (std::size_t c = 0; c < C; ++c) grad_ptrs.push_back(grows.data() + c * HW);
      }
      loss += detail::cov_identity_l1<T>(row_ptrs, HW, grad_ptrs, scale);
      if (!with_grad) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t ch = idx.at(c, m);
        const T w = idx.weight_at(c, m);
        const T* src = f.plane(n, ch);
        const T* gr = grows.data() + c * HW;
        T* gf = res.grad_features.plane(n, ch);
        double gw = 0.0;
        for (std::size_t i = 0; i < HW; ++i) {
          gf[i] += gr[i] * w;
          gw += static_cast<double>(gr[i]) * src[i];
        }
        res.grad_weights[c * K + ch] += static_cast<T>(gw);
      }
    }
  }
  res.loss = static_cast<T>(loss);
  return res;
}

}  // namespace semaware
