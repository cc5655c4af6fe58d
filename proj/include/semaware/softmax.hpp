#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "semaware/tensor.hpp"

namespace semaware {

// Category ids per pixel, dims (N, H, W).
using LabelMap = Tensor<std::int32_t>;

// Softmax over the channel axis of an (N, C, H, W) tensor.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  require_rank(logits, 4, "softmax_channels");
  const std::size_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  Tensor<T> out(logits.dims());
  std::vector<T> mx(HW), sum(HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(logits.plane(n, 0), HW, mx.data());
    for (std::size_t c = 1; c < C; ++c) {
      const T* l = logits.plane(n, c);
      for (std::size_t p = 0; p < HW; ++p) mx[p] = std::max(mx[p], l[p]);
    }
    std::fill(sum.begin(), sum.end(), T{0});
    for (std::size_t c = 0; c < C; ++c) {
      const T* l = logits.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t p = 0; p < HW; ++p) {
        o[p] = fast_exp(l[p] - mx[p]);
        sum[p] += o[p];
      }
    }
    for (std::size_t p = 0; p < HW; ++p) sum[p] = T{1} / sum[p];
    for (std::size_t c = 0; c < C; ++c) {
      T* o = out.plane(n, c);
      for (std::size_t p = 0; p < HW; ++p) o[p] *= sum[p];
    }
  }
  return out;
}

// Given softmax output and dL/dprob, returns dL/dlogits.
template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& prob, const Tensor<T>& grad_prob) {
  const std::size_t N = prob.dim(0), C = prob.dim(1), HW = prob.dim(2) * prob.dim(3);
  Tensor<T> g(prob.dims());
  std::vector<T> dot(HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::fill(dot.begin(), dot.end(), T{0});
    for (std::size_t c = 0; c < C; ++c) {
      const T* pr = prob.plane(n, c);
      const T* gp = grad_prob.plane(n, c);
      for (std::size_t p = 0; p < HW; ++p) dot[p] += pr[p] * gp[p];
    }
    for (std::size_t c = 0; c < C; ++c) {
      const T* pr = prob.plane(n, c);
      const T* gp = grad_prob.plane(n, c);
      T* o = g.plane(n, c);
      for (std::size_t p = 0; p < HW; ++p) o[p] = pr[p] * (gp[p] - dot[p]);
    }
  }
  return g;
}

template <typename T>
void check_labels(const LabelMap& labels, const Tensor<T>& logits, const char* what) {
  if (labels.rank() != 3 || labels.dim(0) != logits.dim(0) || labels.dim(1) != logits.dim(2) ||
      labels.dim(2) != logits.dim(3)) {
    throw std::invalid_argument(std::string(what) + ": label map " + shape_str(labels.dims()) +
                                " does not match logits " + shape_str(logits.dims()));
  }
}

template <typename T>
struct CrossEntropy {
  T loss{};
  Tensor<T> grad;  // d loss / d logits
  Tensor<T> prob;
};

// Pixel-mean cross entropy of channel-softmax(logits) against labels.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels) {
  check_labels(labels, logits, "softmax_cross_entropy");
  const std::size_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  CrossEntropy<T> out;
  out.prob = softmax_channels(logits);
  out.grad = out.prob;
  const double inv = 1.0 / static_cast<double>(N * HW);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < HW; ++p) {
      const auto y = labels[n * HW + p];
      if (y < 0 || static_cast<std::size_t>(y) >= C) {
        throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                    " outside 0.." + std::to_string(C - 1));
      }
      const T py = out.prob.plane(n, static_cast<std::size_t>(y))[p];
      loss -= std::log(std::max<double>(py, 1e-300));
      out.grad.plane(n, static_cast<std::size_t>(y))[p] -= T{1};
    }
  }
  for (auto& v : out.grad.values()) v = static_cast<T>(v * inv);
  out.loss = static_cast<T>(loss * inv);
  return out;
}

// Per-pixel argmax over channels -> (N, H, W).
template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits) {
  require_rank(logits, 4, "argmax_channels");
  const std::size_t N = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  LabelMap out({N, logits.dim(2), logits.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      T bv = logits.plane(n, 0)[p];
      for (std::size_t c = 1; c < C; ++c) {
        if (logits.plane(n, c)[p] > bv) {
          bv = logits.plane(n, c)[p];
          best = c;
        }
      }
      out[n * HW + p] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

}  // namespace semaware
