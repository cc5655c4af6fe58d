#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "semaware/conv.hpp"
#include "semaware/norm_whiten.hpp"
#include "semaware/rng.hpp"
#include "semaware/san.hpp"
#include "semaware/saw.hpp"
#include "semaware/softmax.hpp"
#include "semaware/tensor.hpp"
#include "semaware/tensor_io.hpp"

namespace semaware {

// off: plain stage output. on: SAN transform plus its loss. aux: the
// stage-local mask classifier is trained (mask CE) but features pass through
// untouched; it exists to supply SAW's classifier weights without SAN.
enum class SanMode { off, on, aux };

// Which whitening loss the `saw` switch enables on the stage outputs.
enum class Grouping { iw, giw, saw };

inline std::string to_string(SanMode m) {
  switch (m) {
    case SanMode::off: return "off";
    case SanMode::on: return "on";
    case SanMode::aux: return "aux";
  }
  return "?";
}

inline std::string to_string(Grouping g) {
  switch (g) {
    case Grouping::iw: return "iw";
    case Grouping::giw: return "giw";
    case Grouping::saw: return "saw";
  }
  return "?";
}

inline SanMode parse_san_mode(const std::string& s) {
  if (s == "off") return SanMode::off;
  if (s == "on") return SanMode::on;
  if (s == "aux") return SanMode::aux;
  throw std::invalid_argument("san: expected on|off|aux, got '" + s + "'");
}

inline Grouping parse_grouping(const std::string& s) {
  if (s == "iw") return Grouping::iw;
  if (s == "giw") return Grouping::giw;
  if (s == "saw") return Grouping::saw;
  throw std::invalid_argument("grouping: expected iw|giw|saw, got '" + s + "'");
}

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t k1 = 16;
  std::size_t k2 = 16;
  std::size_t num_classes = 4;
  std::size_t categories = 4;  // C
  SanMode san = SanMode::on;
  bool saw = true;
  Grouping grouping = Grouping::saw;
  bool cfr = true;
  RegionConfig region;
  NormConfig norm;

  bool has_classifier() const { return san != SanMode::off; }
  SanOptions san_options() const { return SanOptions{norm, region, cfr}; }
  std::array<std::size_t, 2> stage_channels() const { return {k1, k2}; }

  void validate() const {
    if (in_channels == 0 || k1 == 0 || k2 == 0) throw std::invalid_argument("channel counts must be positive");
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (categories == 0 || categories > num_classes) {
      throw std::invalid_argument("C=" + std::to_string(categories) + " must be in 1..num_classes=" +
                                  std::to_string(num_classes));
    }
    if (k1 % categories != 0 || k2 % categories != 0) {
      throw std::invalid_argument("C=" + std::to_string(categories) + " must divide K1=" + std::to_string(k1) +
                                  " and K2=" + std::to_string(k2));
    }
    if (saw && grouping == Grouping::saw && san == SanMode::off) {
      throw std::invalid_argument("saw grouping needs the SAN classifier weights (san on or aux)");
    }
    region.validate();
    norm.validate();
  }
};

struct TrainConfig {
  double lr0 = 5e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch = 2;
  double poly_power = 0.9;
  std::size_t iters = 2000;
  double lambda_san = 1.0;
  double lambda_saw = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto nonneg = [](double v, const char* name) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be >= 0");
    };
    nonneg(lr0, "lr0");
    nonneg(weight_decay, "weight_decay");
    nonneg(lambda_san, "lambda_san");
    nonneg(lambda_saw, "lambda_saw");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    if (!(poly_power > 0.0)) throw std::invalid_argument("poly_power must be > 0");
    if (batch == 0) throw std::invalid_argument("batch must be >= 1");
    if (iters == 0) throw std::invalid_argument("iters must be >= 1");
  }

  // lr0 * (1 - iter/iters)^power, 0 from iters on.
  double lr_at(std::size_t iter) const {
    if (iter >= iters) return 0.0;
    return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(iters), poly_power);
  }
};

template <typename T>
struct ToyNet {
  ModelConfig cfg;
  Tensor<T> w1, b1;  // 3x3, in -> K1
  Tensor<T> w2, b2;  // 3x3, K1 -> K2
  Tensor<T> wh, bh;  // 1x1, K2 -> classes
  std::vector<SanState<T>> san;  // one per stage when the model has a classifier

  static ToyNet zeros(const ModelConfig& cfg) {
    cfg.validate();
    ToyNet net;
    net.cfg = cfg;
    net.w1 = Tensor<T>({cfg.k1, cfg.in_channels, 3, 3});
    net.b1 = Tensor<T>({cfg.k1});
    net.w2 = Tensor<T>({cfg.k2, cfg.k1, 3, 3});
    net.b2 = Tensor<T>({cfg.k2});
    net.wh = Tensor<T>({cfg.num_classes, cfg.k2, 1, 1});
    net.bh = Tensor<T>({cfg.num_classes});
    if (cfg.has_classifier()) {
      for (std::size_t k : cfg.stage_channels()) net.san.push_back(SanState<T>::zeros(cfg.categories, k));
    }
    return net;
  }

  // He-uniform stages, U(+-1/sqrt(K2)) head, zero biases. The backbone draws
  // from `rng` alone so models differing only in SAN/SAW start identically.
  static ToyNet init(const ModelConfig& cfg, SeededRng& rng) {
    ToyNet net = zeros(cfg);
    const double a1 = std::sqrt(6.0 / static_cast<double>(cfg.in_channels * 9));
    const double a2 = std::sqrt(6.0 / static_cast<double>(cfg.k1 * 9));
    const double ah = 1.0 / std::sqrt(static_cast<double>(cfg.k2));
    net.w1 = Tensor<T>::uniform(net.w1.dims(), -a1, a1, rng);
    net.w2 = Tensor<T>::uniform(net.w2.dims(), -a2, a2, rng);
    net.wh = Tensor<T>::uniform(net.wh.dims(), -ah, ah, rng);
    if (cfg.has_classifier()) {
      SeededRng srng = rng.fork(0x5A4E);
      const auto ks = cfg.stage_channels();
      for (std::size_t s = 0; s < 2; ++s) net.san[s] = SanState<T>::init(cfg.categories, ks[s], srng);
    }
    return net;
  }

  ToyNet zeros_like() const { return zeros(cfg); }

  std::vector<std::pair<std::string, Tensor<T>*>> params() {
    std::vector<std::pair<std::string, Tensor<T>*>> p{{"stage1.weight", &w1}, {"stage1.bias", &b1},
                                                      {"stage2.weight", &w2}, {"stage2.bias", &b2},
                                                      {"head.weight", &wh},   {"head.bias", &bh}};
    for (std::size_t s = 0; s < san.size(); ++s) {
      for (auto& [name, t] : san[s].params()) p.emplace_back("san" + std::to_string(s + 1) + "." + name, t);
    }
    return p;
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> params() const {
    auto p = const_cast<ToyNet*>(this)->params();
    return {p.begin(), p.end()};
  }

  template <typename U>
  ToyNet<U> cast() const {
    ToyNet<U> out = ToyNet<U>::zeros(cfg);
    auto src = params();
    auto dst = out.params();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }
};

template <typename T>
struct StageTap {
  Tensor<T> act;                     // relu(conv(x)), the SAN input
  Tensor<T> out;                     // stage output
  std::optional<SanCache<T>> san;    // SAN on
  Tensor<T> aux_logits;              // SAN aux, training only
};

template <typename T>
struct NetForward {
  Tensor<T> logits;
  std::array<StageTap<T>, 2> stages;
};

using StageRegions = std::array<SanRegions, 2>;

// stage1 -> SAN1 -> stage2 -> SAN2 -> head. `fixed_regions` replaces the
// k-means partition of both SAN stages.
template <typename T>
NetForward<T> forward(const ToyNet<T>& net, const Tensor<T>& images, Mode mode = Mode::train,
                      const StageRegions* fixed_regions = nullptr) {
  require_rank(images, 4, "forward");
  if (images.dim(1) != net.cfg.in_channels) {
    throw std::invalid_argument("forward: images have " + std::to_string(images.dim(1)) + " channels, model expects " +
                                std::to_string(net.cfg.in_channels));
  }
  const auto opts = net.cfg.san_options();
  NetForward<T> fw;
  const Tensor<T>* x = &images;
  const std::array<const Tensor<T>*, 4> conv{&net.w1, &net.b1, &net.w2, &net.b2};
  for (std::size_t s = 0; s < 2; ++s) {
    auto& tap = fw.stages[s];
    tap.act = relu(conv2d(*x, *conv[2 * s], *conv[2 * s + 1]));
    if (net.cfg.san == SanMode::on) {
      auto sf = san_forward(tap.act, net.san[s], opts, mode, fixed_regions ? &(*fixed_regions)[s] : nullptr);
      tap.out = std::move(sf.output);
      tap.san = std::move(sf.cache);
    } else {
      if (net.cfg.san == SanMode::aux && mode == Mode::train) {
        tap.aux_logits = conv2d(tap.act, net.san[s].cls_weight, net.san[s].cls_bias);
      }
      tap.out = tap.act;
    }
    x = &tap.out;
  }
  fw.logits = conv2d(*x, net.wh, net.bh);
  return fw;
}

struct LossParts {
  double total = 0.0;
  double ce = 0.0;
  std::array<double, 2> san{};     // unweighted SAN (or aux mask CE) loss per stage
  std::array<double, 2> whiten{};  // unweighted whitening loss per stage
};

template <typename T>
struct LossAndGrads {
  LossParts parts;
  ToyNet<T> grads;  // empty tensors when gradients were not requested
};

namespace detail {

template <typename T>
ChannelIndexMatrix<T> stage_indexes(const ToyNet<T>& net, std::size_t s,
                                    const std::array<ChannelIndexMatrix<T>, 2>* fixed) {
  const auto block = net.san[s].classifier_block();
  return fixed ? with_weights((*fixed)[s], block) : select_channel_indexes(block);
}

}  // namespace detail

// CE(head) + lambda_san * sum L_SAN + lambda_saw * sum L_whiten with the full
// backward pass. `fixed_idx` freezes SAW's channel selection (weights are
// still read from the current classifier).
template <typename T>
LossAndGrads<T> total_loss(const ToyNet<T>& net, const Tensor<T>& images, const LabelMap& labels,
                           const NetForward<T>& fw, const TrainConfig& tc, bool with_grad = true,
                           const std::array<ChannelIndexMatrix<T>, 2>* fixed_idx = nullptr) {
  const auto& cfg = net.cfg;
  const auto opts = cfg.san_options();
  LossAndGrads<T> res;
  auto ce = softmax_cross_entropy(fw.logits, labels);
  res.parts.ce = ce.loss;
  double total = ce.loss;

  ToyNet<T>& g = res.grads;
  Tensor<T> dout;
  if (with_grad) {
    g = net.zeros_like();
    auto hb = conv2d_backward(fw.stages[1].out, net.wh, ce.grad);
    g.wh = std::move(hb.weight);
    g.bh = std::move(hb.bias);
    dout = std::move(hb.input);
  }

  const T lsan = static_cast<T>(tc.lambda_san), lsaw = static_cast<T>(tc.lambda_saw);
  for (std::size_t s = 2; s-- > 0;) {
    const auto& tap = fw.stages[s];

    if (cfg.saw && tc.lambda_saw > 0.0) {
      double wl = 0.0;
      Tensor<T> wg;
      switch (cfg.grouping) {
        case Grouping::iw: {
          auto r = iw_loss(tap.out, with_grad);
          wl = r.loss;
          wg = std::move(r.grad);
          break;
        }
        case Grouping::giw: {
          auto r = giw_loss(tap.out, tap.out.dim(1) / cfg.categories, with_grad);
          wl = r.loss;
          wg = std::move(r.grad);
          break;
        }
        case Grouping::saw: {
          auto r = saw_loss(tap.out, detail::stage_indexes(net, s, fixed_idx), with_grad);
          wl = r.loss;
          wg = std::move(r.grad_features);
          if (with_grad) {
            T* cw = g.san[s].cls_weight.data();
            for (std::size_t i = 0; i < r.grad_weights.size(); ++i) cw[i] += lsaw * r.grad_weights[i];
          }
          break;
        }
      }
      res.parts.whiten[s] = wl;
      total += tc.lambda_saw * wl;
      if (with_grad) axpy(lsaw, wg, dout);
    }

    Tensor<T> dact;
    if (cfg.san == SanMode::on) {
      const auto& cache = *tap.san;
      const auto obj = objective_features(tap.act, labels, net.san[s], opts);
      auto l = san_loss(tap.out, obj, cache.logits, labels);
      res.parts.san[s] = l.loss;
      total += tc.lambda_san * l.loss;
      if (with_grad) {
        axpy(lsan, l.grad_output, dout);
        for (auto& v : l.grad_logits.values()) v *= lsan;
        for (auto& v : l.grad_objective.values()) v *= lsan;
        auto sb = san_backward(tap.act, net.san[s], opts, cache, dout, l.grad_logits);
        auto ob = objective_features_backward(tap.act, labels, net.san[s], opts, l.grad_objective);
        axpy(T{1}, ob.input, sb.input);
        axpy(T{1}, ob.gamma, sb.params.gamma);
        axpy(T{1}, ob.beta, sb.params.beta);
        auto dst = g.san[s].params();
        auto src = sb.params.params();
        for (std::size_t i = 0; i < dst.size(); ++i) axpy(T{1}, *src[i].second, *dst[i].second);
        dact = std::move(sb.input);
      }
    } else if (cfg.san == SanMode::aux) {
      auto mce = softmax_cross_entropy(tap.aux_logits, remap_labels(labels, cfg.categories));
      res.parts.san[s] = mce.loss;
      total += tc.lambda_san * mce.loss;
      if (with_grad) {
        for (auto& v : mce.grad.values()) v *= lsan;
        auto cb = conv2d_backward(tap.act, net.san[s].cls_weight, mce.grad);
        axpy(T{1}, cb.weight, g.san[s].cls_weight);
        axpy(T{1}, cb.bias, g.san[s].cls_bias);
        dact = std::move(dout);
        axpy(T{1}, cb.input, dact);
      }
    } else if (with_grad) {
      dact = std::move(dout);
    }

    if (with_grad) {
      const Tensor<T>& x = s == 0 ? images : fw.stages[0].out;
      auto cb = conv2d_backward(x, s == 0 ? net.w1 : net.w2, relu_backward(tap.act, dact), s == 1);
      (s == 0 ? g.w1 : g.w2) = std::move(cb.weight);
      (s == 0 ? g.b1 : g.b2) = std::move(cb.bias);
      if (s == 1) dout = std::move(cb.input);
    }
  }
  res.parts.total = total;
  return res;
}

// Classic momentum with weight decay folded into the velocity:
//   v <- m v + g + wd theta;  theta <- theta - lr(iter) v.
template <typename T>
void sgd_step(ToyNet<T>& net, const ToyNet<T>& grads, ToyNet<T>& velocity, const TrainConfig& tc,
              std::size_t iter) {
  const T lr = static_cast<T>(tc.lr_at(iter));
  const T m = static_cast<T>(tc.momentum), wd = static_cast<T>(tc.weight_decay);
  auto p = net.params();
  auto g = grads.params();
  auto v = velocity.params();
  if (p.size() != g.size() || p.size() != v.size()) throw std::invalid_argument("sgd_step: parameter sets differ");
  for (std::size_t i = 0; i < p.size(); ++i) {
    T* th = p[i].second->data();
    const T* gr = g[i].second->data();
    T* vel = v[i].second->data();
    require_same_shape(*p[i].second, *g[i].second, "sgd_step");
    for (std::size_t j = 0; j < p[i].second->size(); ++j) {
      vel[j] = m * vel[j] + gr[j] + wd * th[j];
      th[j] -= lr * vel[j];
    }
  }
}

// Images (N, 3, H, W) in [0, 1] with labels (N, H, W).
struct Dataset {
  Tensor<float> images;
  LabelMap labels;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }

  template <typename T = float>
  Tensor<T> image_batch(const std::vector<std::size_t>& ids) const {
    const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3), HW = H * W;
    Tensor<T> out({ids.size(), C, H, W});
    for (std::size_t b = 0; b < ids.size(); ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = images.plane(ids[b], c);
        T* dst = out.plane(b, c);
        for (std::size_t i = 0; i < HW; ++i) dst[i] = static_cast<T>(src[i]);
      }
    return out;
  }

  LabelMap label_batch(const std::vector<std::size_t>& ids) const {
    const std::size_t H = labels.dim(1), W = labels.dim(2);
    LabelMap out({ids.size(), H, W});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      std::copy_n(labels.data() + ids[b] * H * W, H * W, out.data() + b * H * W);
    }
    return out;
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  LossParts loss;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> trace;

  // Mean wall time of steps [from, to).
  double mean_step_seconds(std::size_t from = 100, std::size_t to = 200) const {
    to = std::min(to, trace.size());
    if (from >= to) {
      from = 0;
      to = trace.size();
    }
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += trace[i].seconds;
    return to > from ? s / static_cast<double>(to - from) : 0.0;
  }
};

// Epoch-wise shuffled mini-batches from tc.seed; a trailing partial batch is
// filled from the next permutation.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(batch), rng_(SeededRng(seed).fork(0xBA7C)) {
    if (n == 0) throw std::invalid_argument("BatchSampler: dataset is empty");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> ids;
    while (ids.size() < batch_) {
      if (pos_ == order_.size()) reshuffle();
      ids.push_back(order_[pos_++]);
    }
    return ids;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  SeededRng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

template <typename T>
using TrainHook = std::function<void(std::size_t step, const ToyNet<T>& net)>;

template <typename T>
TrainResult train(ToyNet<T>& net, const Dataset& data, const TrainConfig& tc, const TrainHook<T>& hook = {},
                  std::size_t hook_every = 0) {
  tc.validate();
  BatchSampler sampler(data.size(), tc.batch, tc.seed);
  ToyNet<T> velocity = net.zeros_like();
  TrainResult res;
  res.trace.reserve(tc.iters);
  for (std::size_t it = 0; it < tc.iters; ++it) {
    const auto ids = sampler.next();
    const auto images = data.image_batch<T>(ids);
    const auto labels = data.label_batch(ids);
    const auto t0 = std::chrono::steady_clock::now();
    const auto fw = forward(net, images, Mode::train);
    auto lg = total_loss(net, images, labels, fw, tc);
    if (!std::isfinite(lg.parts.total)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(it) + ": ce=" +
                             std::to_string(lg.parts.ce) + " san=" +
                             std::to_string(lg.parts.san[0] + lg.parts.san[1]) +
                             " whiten=" + std::to_string(lg.parts.whiten[0] + lg.parts.whiten[1]));
    }
    sgd_step(net, lg.grads, velocity, tc, it);
    const auto t1 = std::chrono::steady_clock::now();
    res.trace.push_back({lg.parts, std::chrono::duration<double>(t1 - t0).count()});
    if (hook && hook_every > 0 && (it + 1) % hook_every == 0) hook(it + 1, net);
  }
  return res;
}

// Argmax predictions in inference mode, `chunk` images at a time.
template <typename T>
LabelMap predict(const ToyNet<T>& net, const Dataset& data, std::size_t chunk = 8) {
  const std::size_t N = data.size(), H = data.images.dim(2), W = data.images.dim(3);
  LabelMap out({N, H, W});
  for (std::size_t start = 0; start < N; start += chunk) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(N, start + chunk); ++i) ids.push_back(i);
    const auto fw = forward(net, data.image_batch<T>(ids), Mode::infer);
    const auto pred = argmax_channels(fw.logits);
    std::copy_n(pred.data(), pred.size(), out.data() + start * H * W);
  }
  return out;
}

inline NamedTensors to_checkpoint(const ToyNet<float>& net) {
  NamedTensors out;
  for (const auto& [name, t] : net.params()) out.emplace(name, *t);
  return out;
}

// Fills a model built from `cfg` with checkpoint tensors; names and shapes must match exactly.
inline ToyNet<float> from_checkpoint(const NamedTensors& tensors, const ModelConfig& cfg) {
  ToyNet<float> net = ToyNet<float>::zeros(cfg);
  auto params = net.params();
  if (params.size() != tensors.size()) {
    throw FormatError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model needs " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second.dims() != t->dims()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.dims()) +
                        ", model expects " + shape_str(t->dims()));
    }
    *t = it->second;
  }
  return net;
}

inline void save_net(const std::filesystem::path& path, const ToyNet<float>& net) {
  save_checkpoint(path, to_checkpoint(net));
}

inline ToyNet<float> load_net(const std::filesystem::path& path, const ModelConfig& cfg) {
  return from_checkpoint(load_checkpoint(path), cfg);
}

}  // namespace semaware
