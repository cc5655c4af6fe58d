#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "semaware/gradcheck.hpp"
#include "semaware/norm_whiten.hpp"
#include "semaware/san.hpp"
#include "semaware/saw.hpp"
#include "semaware/toynet.hpp"

namespace semaware {

struct GradcheckCase {
  std::string op;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradcheckSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 3;
  double step = 1e-4;
  double tolerance = 1e-3;
  double kink_margin = 1e-3;  // test points closer than this to a non-smooth spot are resampled
  std::size_t max_attempts = 300;
};

namespace detail {

inline double probe_dot(const Tensor<double>& y, const Tensor<double>& probe) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
  return s;
}

inline double nonzero_min(double m, double v) { return v == 0.0 ? m : std::min(m, std::abs(v)); }

// Smallest |Psi - I| entry over the channels of every sample.
inline double whitening_margin(const Tensor<double>& f) {
  double m = 1e300;
  const std::size_t K = f.dim(1), HW = f.dim(2) * f.dim(3);
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    std::vector<const double*> rows;
    for (std::size_t k = 0; k < K; ++k) rows.push_back(f.plane(n, k));
    const auto cov = row_covariance<double>(std::span<const double* const>(rows), HW);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b) m = nonzero_min(m, cov[a * K + b] - (a == b ? 1.0 : 0.0));
  }
  return m;
}

inline std::vector<Tensor<double>> whitening_groups(const ToyNet<double>& net, const Tensor<double>& out,
                                                    const ChannelIndexMatrix<double>& idx) {
  const auto& cfg = net.cfg;
  if (cfg.grouping == Grouping::saw) return build_groups(out, idx);
  const std::size_t N = out.dim(0), K = out.dim(1), HW = out.dim(2) * out.dim(3);
  const std::size_t G = cfg.grouping == Grouping::iw ? 1 : K / cfg.categories;
  std::vector<Tensor<double>> groups;
  for (std::size_t gi = 0; gi < G; ++gi) {
    Tensor<double> g({N, K / G, out.dim(2), out.dim(3)});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K / G; ++k) std::copy_n(out.plane(n, gi * K / G + k), HW, g.plane(n, k));
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace detail

// Distance of a network evaluation point to the non-smooth or degenerate spots
// of total_loss: ReLU inputs, channel-max ties, L1 residuals, near-zero region
// std, whitening residuals. Exact zeros come from dead channels and stay zero
// under perturbation, so they are skipped.
inline double total_loss_kink_margin(const ToyNet<double>& net, const Tensor<double>& x, const LabelMap& y,
                                     const NetForward<double>& fw,
                                     const std::array<ChannelIndexMatrix<double>, 2>& idx) {
  double m = 1e300;
  const auto& cfg = net.cfg;
  const std::size_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
  const Tensor<double>* in = &x;
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& tap = fw.stages[s];
    const auto z = conv2d(*in, s ? net.w2 : net.w1, s ? net.b2 : net.b1);
    for (double v : z.values()) m = std::min(m, std::abs(v));
    const std::size_t K = tap.act.dim(1);
    if (cfg.san == SanMode::on) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          double a = -1e300, b = -1e300;
          for (std::size_t k = 0; k < K; ++k) {
            const double v = tap.act.plane(n, k)[i];
            if (v > a) {
              b = a;
              a = v;
            } else if (v > b) {
              b = v;
            }
          }
          if (a > 0) m = std::min(m, a - b);
        }
      const auto obj = objective_features(tap.act, y, net.san[s], cfg.san_options());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t i = 0; i < HW; ++i)
            if (y[n * HW + i] < static_cast<int>(cfg.categories))
              m = detail::nonzero_min(m, tap.out.plane(n, k)[i] - obj.plane(n, k)[i]);
      std::vector<double> xs(HW);
      std::vector<std::uint8_t> gt(HW);
      for (std::size_t c = 0; c < cfg.categories; ++c)
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t i = 0; i < HW; ++i) gt[i] = y[n * HW + i] == static_cast<int>(c);
          // Single-pixel regions have std exactly 0 under any perturbation.
          const bool multi_gt = std::count(gt.begin(), gt.end(), 1) > 1;
          const auto& region = tap.san->regions[c][n];
          const bool multi_region = region.count() > 1;
          for (std::size_t k = 0; k < K; ++k) {
            const double* a = tap.act.plane(n, k);
            const double* sc = tap.san->scale[c].plane(n, 0);
            for (std::size_t i = 0; i < HW; ++i) xs[i] = a[i] * sc[i];
            if (multi_region) m = detail::nonzero_min(m, detail::masked_stats(xs.data(), region.inside.data(), HW).std);
            if (multi_gt) m = detail::nonzero_min(m, detail::masked_stats(a, gt.data(), HW).std);
          }
        }
    }
    if (cfg.saw) {
      for (const auto& g : detail::whitening_groups(net, tap.out, idx[s])) m = std::min(m, detail::whitening_margin(g));
    }
    in = &tap.out;
  }
  return m;
}

namespace detail {

inline void randomize_for_gradcheck(ToyNet<double>& net, SeededRng& r) {
  for (auto& [name, t] : net.params()) {
    if (name.find("gamma") != std::string::npos) {
      *t = Tensor<double>::uniform(t->dims(), 0.5, 1.5, r);
    } else if (name == "stage1.bias" || name == "stage2.bias") {
      *t = Tensor<double>::uniform(t->dims(), 0.1, 0.6, r);  // keep most units active
    } else {
      *t = Tensor<double>::uniform(t->dims(), -0.5, 0.5, r);
    }
  }
}

class CaseRunner {
 public:
  CaseRunner(std::string op, const GradcheckSuiteOptions& o) : o_(o) { res_.op = std::move(op); }

  // `attempt` returns false to resample, else records the report.
  GradcheckCase run(const std::function<bool(GradcheckReport&)>& attempt) {
    for (std::size_t a = 0; a < o_.max_attempts && res_.instances < o_.instances; ++a) {
      GradcheckReport rep;
      if (!attempt(rep)) continue;
      res_.max_rel_error = std::max(res_.max_rel_error, rep.max_rel_error);
      ++res_.instances;
    }
    res_.passed = res_.instances >= o_.instances && res_.max_rel_error < o_.tolerance;
    return res_;
  }

 private:
  GradcheckSuiteOptions o_;
  GradcheckCase res_;
};

inline ModelConfig gradcheck_model(SanMode san, bool saw, Grouping grouping, bool cfr = true,
                                   std::size_t num_classes = 4) {
  ModelConfig cfg;
  cfg.k1 = cfg.k2 = 8;
  cfg.san = san;
  cfg.saw = saw;
  cfg.grouping = grouping;
  cfg.cfr = cfr;
  cfg.num_classes = num_classes;
  return cfg;
}

}  // namespace detail

inline GradcheckCase gradcheck_total_loss(const std::string& name, const ModelConfig& cfg,
                                          const GradcheckSuiteOptions& o, SeededRng& r) {
  TrainConfig tc;
  tc.lambda_san = 0.7;
  tc.lambda_saw = 0.3;
  return detail::CaseRunner(name, o).run([&](GradcheckReport& rep) {
    auto net = ToyNet<double>::zeros(cfg);
    detail::randomize_for_gradcheck(net, r);
    auto x = Tensor<double>::uniform({1, 3, 8, 8}, 0, 1, r);
    LabelMap y({1, 8, 8});
    for (auto& v : y.values()) v = static_cast<int>(r.below(cfg.num_classes));
    const auto fw = forward(net, x);
    StageRegions regions;
    std::array<ChannelIndexMatrix<double>, 2> idx;
    for (std::size_t s = 0; s < 2; ++s) {
      if (fw.stages[s].san) regions[s] = fw.stages[s].san->regions;
      if (cfg.has_classifier()) idx[s] = select_channel_indexes(net.san[s].classifier_block());
    }
    if (total_loss_kink_margin(net, x, y, fw, idx) < o.kink_margin) return false;
    const StageRegions* fixed = cfg.san == SanMode::on ? &regions : nullptr;
    const auto grads = total_loss(net, x, y, fw, tc, true, &idx).grads;
    auto loss = [&] {
      const auto f = forward(net, x, Mode::train, fixed);
      return total_loss(net, x, y, f, tc, false, &idx).parts.total;
    };
    std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> pg;
    auto ps = net.params();
    const auto gs = grads.params();
    std::vector<Tensor<double>*> coords;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      pg.emplace_back(ps[i].second, gs[i].second);
      coords.push_back(ps[i].second);
    }
    // Standardization inside tight clusters is strongly curved; points where
    // the central difference itself has not converged are resampled.
    if (central_difference_instability(loss, coords, o.step) > 2.5e-4) return false;
    rep = gradcheck_params(loss, pg, o.step);
    return true;
  });
}

// Every differentiable operator at 64-bit on small random instances.
inline std::vector<GradcheckCase> run_gradcheck_suite(const GradcheckSuiteOptions& o = {}) {
  SeededRng r(o.seed);
  std::vector<GradcheckCase> out;
  using detail::CaseRunner;

  out.push_back(CaseRunner("conv2d", o).run([&](GradcheckReport& rep) {
    auto x = Tensor<double>::uniform({1, 2, 4, 4}, -1, 1, r);
    auto w = Tensor<double>::uniform({3, 2, 3, 3}, -1, 1, r);
    auto b = Tensor<double>::uniform({3}, -1, 1, r);
    const auto probe = Tensor<double>::uniform({1, 3, 4, 4}, -1, 1, r);
    const auto g = conv2d_backward(x, w, probe);
    rep = gradcheck_params([&] { return detail::probe_dot(conv2d(x, w, b), probe); },
                           {{&w, &g.weight}, {&b, &g.bias}, {&x, &g.input}}, o.step);
    return true;
  }));

  out.push_back(CaseRunner("softmax_cross_entropy", o).run([&](GradcheckReport& rep) {
    const auto z = Tensor<double>::uniform({2, 4, 3, 3}, -2, 2, r);
    LabelMap y({2, 3, 3});
    for (auto& v : y.values()) v = static_cast<int>(r.below(4));
    rep = gradcheck(
        [&](const Tensor<double>& t) {
          auto ce = softmax_cross_entropy(t, y);
          return std::make_pair(static_cast<double>(ce.loss), ce.grad);
        },
        z, o.step);
    return true;
  }));

  out.push_back(CaseRunner("instance_normalize", o).run([&](GradcheckReport& rep) {
    const auto f = Tensor<double>::uniform({2, 3, 3, 3}, -1, 1, r);
    const auto probe = Tensor<double>::uniform(f.dims(), -1, 1, r);
    rep = gradcheck(
        [&](const Tensor<double>& x) {
          return std::make_pair(detail::probe_dot(instance_normalize(x), probe), instance_normalize_backward(x, probe));
        },
        f, o.step);
    return true;
  }));

  out.push_back(CaseRunner("regional_normalize", o).run([&](GradcheckReport& rep) {
    const auto f = Tensor<double>::uniform({2, 3, 3, 3}, -1, 1, r);
    const auto probe = Tensor<double>::uniform(f.dims(), -1, 1, r);
    std::vector<RegionMask> regions;
    for (int n = 0; n < 2; ++n) {
      RegionMask m(3, 3);
      for (auto& v : m.inside) v = r.uniform() < 0.6;
      m.inside[0] = m.inside[1] = 1;
      regions.push_back(m);
    }
    rep = gradcheck(
        [&](const Tensor<double>& x) {
          return std::make_pair(detail::probe_dot(regional_normalize<double>(x, regions), probe),
                                regional_normalize_backward<double>(x, regions, probe));
        },
        f, o.step);
    return true;
  }));

  out.push_back(CaseRunner("cfr_refine", o).run([&](GradcheckReport& rep) {
    auto fp = Tensor<double>::uniform({1, 2, 4, 4}, -1, 1, r);
    auto m = Tensor<double>::uniform({1, 1, 4, 4}, 0, 1, r);
    auto w = Tensor<double>::uniform({1, 3, 3, 3}, -1, 1, r);
    auto b = Tensor<double>::uniform({1}, -1, 1, r);
    const auto probe = Tensor<double>::uniform(fp.dims(), -1, 1, r);
    // Channel-max ties are kinks.
    for (std::size_t i = 0; i < 16; ++i)
      if (std::abs(fp.plane(0, 0)[i] - fp.plane(0, 1)[i]) < o.kink_margin) return false;
    const auto g = cfr_refine_backward(fp, m, w, b, probe);
    rep = gradcheck_params([&] { return detail::probe_dot(cfr_refine(fp, m, w, b), probe); },
                           {{&w, &g.weight}, {&b, &g.bias}, {&fp, &g.fp}, {&m, &g.mask}}, o.step);
    return true;
  }));

  out.push_back(CaseRunner("san_loss", o).run([&](GradcheckReport& rep) {
    auto a = Tensor<double>::uniform({1, 3, 4, 4}, -1, 1, r);
    auto b = Tensor<double>::uniform(a.dims(), -1, 1, r);
    auto z = Tensor<double>::uniform({1, 3, 4, 4}, -2, 2, r);  // C = 2 plus "other"
    LabelMap y({1, 4, 4});
    for (auto& v : y.values()) v = static_cast<int>(r.below(4));
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a[i] - b[i]) < o.kink_margin) return false;
    const auto l = san_loss(a, b, z, y);
    rep = gradcheck_params([&] { return static_cast<double>(san_loss(a, b, z, y).loss); },
                           {{&a, &l.grad_output}, {&b, &l.grad_objective}, {&z, &l.grad_logits}}, o.step);
    return true;
  }));

  out.push_back(CaseRunner("san_forward", o).run([&](GradcheckReport& rep) {
    const std::size_t C = 2, K = 4;
    auto f = Tensor<double>::uniform({1, K, 6, 6}, 0, 2, r);
    auto st = SanState<double>::init(C, K, r);
    for (auto& w : st.cfr_weight) w = Tensor<double>::uniform({1, 3, 3, 3}, -0.5, 0.5, r);
    st.cls_weight = Tensor<double>::uniform({C + 1, K, 1, 1}, -1, 1, r);
    SanOptions opts;
    opts.region = RegionConfig{3, 1, 50};
    const auto probe = Tensor<double>::uniform(f.dims(), -1, 1, r);
    const auto regions = san_forward(f, st, opts).cache.regions;
    const auto fw = san_forward(f, st, opts, Mode::train, &regions);
    const auto g = san_backward(f, st, opts, fw.cache, probe);
    auto loss = [&] { return detail::probe_dot(san_forward(f, st, opts, Mode::train, &regions).output, probe); };
    std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> pg{{&f, &g.input}};
    std::vector<Tensor<double>*> coords{&f};
    auto ps = st.params();
    const auto gs = g.params.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      pg.emplace_back(ps[i].second, gs[i].second);
      coords.push_back(ps[i].second);
    }
    if (central_difference_instability(loss, coords, o.step) > 2.5e-4) return false;
    rep = gradcheck_params(loss, pg, o.step);
    return true;
  }));

  out.push_back(CaseRunner("iw_loss", o).run([&](GradcheckReport& rep) {
    const auto f = Tensor<double>::uniform({2, 4, 3, 3}, -1.5, 1.5, r);
    if (detail::whitening_margin(f) < o.kink_margin) return false;
    rep = gradcheck(
        [](const Tensor<double>& x) {
          auto l = iw_loss(x);
          return std::make_pair(static_cast<double>(l.loss), l.grad);
        },
        f, o.step);
    return true;
  }));

  out.push_back(CaseRunner("giw_loss", o).run([&](GradcheckReport& rep) {
    const auto f = Tensor<double>::uniform({2, 4, 3, 3}, -1.5, 1.5, r);
    if (detail::whitening_margin(f) < o.kink_margin) return false;
    rep = gradcheck(
        [](const Tensor<double>& x) {
          auto l = giw_loss(x, 2);
          return std::make_pair(static_cast<double>(l.loss), l.grad);
        },
        f, o.step);
    return true;
  }));

  out.push_back(CaseRunner("saw_loss", o).run([&](GradcheckReport& rep) {
    auto f = Tensor<double>::uniform({2, 8, 3, 3}, -2, 2, r);
    auto w = Tensor<double>::uniform({4, 8}, -1, 1, r);
    const auto idx = select_channel_indexes(w);
    for (const auto& g : build_groups(f, idx))
      if (detail::whitening_margin(g) < o.kink_margin) return false;
    // Weights move, the selection stays frozen.
    auto loss = [&] {
      auto moved = idx;
      for (std::size_t c = 0; c < idx.categories; ++c)
        for (std::size_t m = 0; m < idx.per_category; ++m)
          moved.weight[c * idx.per_category + m] = w[c * 8 + idx.at(c, m)];
      return static_cast<double>(saw_loss(f, moved, false).loss);
    };
    const auto g = saw_loss(f, idx);
    rep = gradcheck_params(loss, {{&f, &g.grad_features}, {&w, &g.grad_weights}}, o.step);
    return true;
  }));

  using detail::gradcheck_model;
  out.push_back(gradcheck_total_loss("total_loss[baseline]", gradcheck_model(SanMode::off, false, Grouping::iw), o, r));
  out.push_back(gradcheck_total_loss("total_loss[san+saw]", gradcheck_model(SanMode::on, true, Grouping::saw), o, r));
  out.push_back(
      gradcheck_total_loss("total_loss[san,no-cfr]", gradcheck_model(SanMode::on, false, Grouping::saw, false), o, r));
  out.push_back(gradcheck_total_loss("total_loss[aux+saw]", gradcheck_model(SanMode::aux, true, Grouping::saw), o, r));
  out.push_back(gradcheck_total_loss("total_loss[iw]", gradcheck_model(SanMode::off, true, Grouping::iw), o, r));
  out.push_back(gradcheck_total_loss("total_loss[giw]", gradcheck_model(SanMode::off, true, Grouping::giw), o, r));
  out.push_back(gradcheck_total_loss("total_loss[other-category]",
                                     gradcheck_model(SanMode::on, true, Grouping::saw, true, 6), o, r));
  return out;
}

}  // namespace semaware
