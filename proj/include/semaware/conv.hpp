#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "semaware/tensor.hpp"

namespace semaware {

// Stride-1 cross-correlation with "same" zero padding. Weights are
// (Cout, Cin, k, k) with k in {1, 3}; bias is (Cout).
template <typename T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t k = weight.dim(2);
  if ((k != 1 && k != 3) || weight.dim(3) != k) {
    throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(weight.dims()));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x.dim(1)) +
                                " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.dims()) +
                                " does not match weight " + shape_str(weight.dims()));
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_conv_shapes(x, weight, bias);
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = weight.dim(0), ks = weight.dim(2);
  const std::size_t HW = H * W;
  Tensor<T> y({N, Co, H, W});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      T* out = y.plane(n, co);
      std::fill_n(out, HW, bias[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* in = x.plane(n, ci);
        const T* wk = weight.data() + (co * Ci + ci) * ks * ks;
        if (ks == 1) {
          const T wv = wk[0];
          for (std::size_t i = 0; i < HW; ++i) out[i] += wv * in[i];
          continue;
        }
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t h0 = kh == 0 ? 1 : 0, h1 = kh == 2 ? H - 1 : H;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const T wv = wk[kh * 3 + kw];
            const std::size_t w0 = kw == 0 ? 1 : 0, w1 = kw == 2 ? W - 1 : W;
            for (std::size_t h = h0; h < h1; ++h) {
              T* o = out + h * W;
              const T* r = in + (h + kh - 1) * W + kw - 1;
              for (std::size_t w = w0; w < w1; ++w) o[w] += wv * r[w];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                             bool need_input_grad = true) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = weight.dim(0), ks = weight.dim(2);
  const std::size_t HW = H * W;
  ConvGrads<T> g;
  if (need_input_grad) g.input = Tensor<T>(x.dims());
  g.weight = Tensor<T>(weight.dims());
  g.bias = Tensor<T>({Co});
  std::vector<T> acc(HW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T* go = grad_out.plane(n, co);
      T bsum{0};
      for (std::size_t i = 0; i < HW; ++i) bsum += go[i];
      g.bias[co] += bsum;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* in = x.plane(n, ci);
        T* gi = need_input_grad ? g.input.plane(n, ci) : nullptr;
        const T* wk = weight.data() + (co * Ci + ci) * ks * ks;
        T* gw = g.weight.data() + (co * Ci + ci) * ks * ks;
        if (ks == 1) {
          T s{0};
          for (std::size_t i = 0; i < HW; ++i) acc[i] = go[i] * in[i];
          for (std::size_t i = 0; i < HW; ++i) s += acc[i];
          gw[0] += s;
          if (gi) {
            const T wv = wk[0];
            for (std::size_t i = 0; i < HW; ++i) gi[i] += wv * go[i];
          }
          continue;
        }
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t h0 = kh == 0 ? 1 : 0, h1 = kh == 2 ? H - 1 : H;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const std::size_t w0 = kw == 0 ? 1 : 0, w1 = kw == 2 ? W - 1 : W;
            const T wv = wk[kh * 3 + kw];
            std::fill_n(acc.begin(), W, T{0});
            for (std::size_t h = h0; h < h1; ++h) {
              const T* o = go + h * W;
              const T* r = in + (h + kh - 1) * W + kw - 1;
              for (std::size_t w = w0; w < w1; ++w) acc[w] += o[w] * r[w];
              if (gi) {
                T* rg = gi + (h + kh - 1) * W + kw - 1;
                for (std::size_t w = w0; w < w1; ++w) rg[w] += wv * o[w];
              }
            }
            T s{0};
            for (std::size_t w = 0; w < W; ++w) s += acc[w];
            gw[kh * 3 + kw] += s;
          }
        }
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return ew(x, UnaryOp::relu);
}

// Gradient of relu given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(y[i] > T{0})) g[i] = T{0};
  }
  return g;
}

}  // namespace semaware
