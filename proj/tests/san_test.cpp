#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "semaware/gradcheck.hpp"
#include "semaware/san.hpp"
#include "test_util.hpp"

namespace semaware {
namespace {

using testing::dp_kmeans;
using testing::lloyd_cost;

TEST(KMeans1DTest, TwoClusterExample) {
  std::vector<double> v{0.1, 0.2, 0.9, 1.0};
  auto km = kmeans_1d<double>(v, 2);
  ASSERT_EQ(km.centers.size(), 2u);
  EXPECT_NEAR(km.centers[0], 0.15, 1e-12);
  EXPECT_NEAR(km.centers[1], 0.95, 1e-12);
  EXPECT_EQ(km.assignment, (std::vector<std::size_t>{0, 0, 1, 1}));
  auto dp = dp_kmeans(v, 2);
  EXPECT_EQ(dp.clusters[0], (std::vector<double>{0.1, 0.2}));
  EXPECT_NEAR(lloyd_cost(v, km), dp.cost, 1e-12);
}

TEST(KMeans1DTest, DegenerateInputs) {
  std::vector<double> same(6, 0.3);
  auto km = kmeans_1d<double>(same, 3);
  EXPECT_EQ(km.centers.size(), 1u);
  for (auto a : km.assignment) EXPECT_EQ(a, 0u);

  std::vector<double> v{1, 2, 4, 9};
  auto one = kmeans_1d<double>(v, 1);
  ASSERT_EQ(one.centers.size(), 1u);
  EXPECT_DOUBLE_EQ(one.centers[0], 4.0);

  EXPECT_THROW(kmeans_1d<double>(v, 5), std::invalid_argument);
}

TEST(KMeans1DTest, MatchesDynamicProgrammingOnSeparatedData) {
  SeededRng r(21);
  for (int trial = 0; trial < 200; ++trial) {
    // Balanced, well separated blobs; Lloyd is a local method and can stall on
    // strongly unbalanced ones.
    const std::size_t k = 2 + r.below(4);
    const std::size_t per = 1 + r.below(64 / k);
    const std::size_t n = k * per;
    std::vector<double> centers;
    for (std::size_t j = 0; j < k; ++j) centers.push_back(static_cast<double>(j) * 3.0 + r.uniform(0, 1));
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = centers[i % k] + r.uniform(-0.4, 0.4);
    for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[r.below(i)]);
    auto km = kmeans_1d<double>(v, k);
    auto dp = dp_kmeans(v, k);
    EXPECT_NEAR(lloyd_cost(v, km), dp.cost, 1e-5) << "trial " << trial << " n=" << n << " k=" << k;
  }
}

TEST(KMeans1DTest, NeverBeatsTheOptimum) {
  SeededRng r(22);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + r.below(5);
    const std::size_t n = k + r.below(40);
    std::vector<double> v(n);
    for (auto& x : v) x = r.uniform(-1, 1);
    auto km = kmeans_1d<double>(v, k);
    EXPECT_GE(lloyd_cost(v, km), dp_kmeans(v, k).cost - 1e-9);
    // Centers are the means of their clusters.
    for (std::size_t j = 0; j < km.centers.size(); ++j) {
      double s = 0;
      std::size_t c = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (km.assignment[i] == j) {
          s += v[i];
          ++c;
        }
      }
      ASSERT_GT(c, 0u);
      EXPECT_NEAR(km.centers[j], s / c, 1e-12);
    }
  }
}

TEST(PartitionRegionTest, TopClusterIsRegion) {
  Tensor<double> f({1, 1, 4, 4});
  f[5] = 1.0;
  f[10] = 1.0;
  auto regions = partition_region(f, RegionConfig{2, 1, 50});
  ASSERT_EQ(regions.size(), 1u);
  EXPECT_EQ(regions[0].count(), 2u);
  EXPECT_TRUE(regions[0].inside[5]);
  EXPECT_TRUE(regions[0].inside[10]);
}

TEST(PartitionRegionTest, ConstantMapGivesFullImage) {
  Tensor<double> f({2, 3, 4, 4}, 0.7);
  auto regions = partition_region(f, RegionConfig{});
  for (const auto& r : regions) EXPECT_EQ(r.count(), 16u);
}

TEST(PartitionRegionTest, AllButLowestCluster) {
  Tensor<double> f({1, 1, 4, 4});
  for (int i = 10; i < 13; ++i) f[i] = 1.0;
  for (int i = 13; i < 16; ++i) f[i] = 1.1;
  auto regions = partition_region(f, RegionConfig{3, 2, 50});
  std::vector<double> vals(f.values().begin(), f.values().end());
  auto dp = dp_kmeans(vals, 3);
  EXPECT_EQ(dp.clusters[0].size(), 10u);
  EXPECT_EQ(regions[0].count(), 6u);
  for (int i = 0; i < 10; ++i) EXPECT_FALSE(regions[0].inside[i]);
}

TEST(PredictMasksTest, Softmax) {
  auto st = SanState<double>::zeros(3, 2);
  SeededRng r(1);
  auto f = Tensor<double>::uniform({2, 2, 3, 3}, -1, 1, r);
  auto m = predict_masks(f, st);
  for (double v : m.masks.values()) EXPECT_NEAR(v, 0.25, 1e-12);
  st.cls_bias[1] = 50;
  m = predict_masks(f, st);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(m.masks.plane(0, 1)[i], 1.0, 1e-12);
  st = SanState<double>::init(3, 2, r);
  m = predict_masks(f, st);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += m.masks.plane(n, c)[i];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(MaskBranchTest, Examples) {
  SeededRng r(2);
  auto f = Tensor<double>::uniform({1, 3, 2, 2}, -1, 1, r);
  Tensor<double> masks({1, 3, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) masks.plane(0, 0)[i] = 1.0;
  EXPECT_EQ(mask_branch(f, masks, 0), f);
  const auto off = mask_branch(f, masks, 1);
  for (double v : off.values()) EXPECT_EQ(v, 0.0);
  auto one = Tensor<double>::from_values({1, 1, 1, 1}, {4.0});
  auto q = Tensor<double>::from_values({1, 2, 1, 1}, {0.25, 0.75});
  EXPECT_DOUBLE_EQ(mask_branch(one, q, 0)[0], 1.0);
  EXPECT_THROW(mask_branch(one, q, 1), std::invalid_argument);
}

TEST(CfrRefineTest, ZeroWeightsHalveAndZeroInputStaysZero) {
  SeededRng r(3);
  auto fp = Tensor<double>::uniform({1, 2, 4, 4}, -1, 1, r);
  auto m = Tensor<double>::uniform({1, 1, 4, 4}, 0, 1, r);
  Tensor<double> w({1, 3, 3, 3}), b({1});
  auto out = cfr_refine(fp, m, w, b);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], 0.5 * fp[i]);
  auto w2 = Tensor<double>::uniform({1, 3, 3, 3}, -1, 1, r);
  Tensor<double> zero({1, 2, 4, 4});
  const auto refined = cfr_refine(zero, m, w2, b);
  for (double v : refined.values()) EXPECT_EQ(v, 0.0);
}

TEST(CfrRefineTest, GradientsMatchFiniteDifferences) {
  SeededRng r(4);
  for (int trial = 0; trial < 3; ++trial) {
    auto fp = Tensor<double>::uniform({1, 2, 4, 4}, -1, 1, r);
    auto m = Tensor<double>::uniform({1, 1, 4, 4}, 0, 1, r);
    auto w = Tensor<double>::uniform({1, 3, 3, 3}, -1, 1, r);
    auto b = Tensor<double>::uniform({1}, -1, 1, r);
    auto probe = Tensor<double>::uniform({1, 2, 4, 4}, -1, 1, r);
    auto loss = [&] {
      auto y = cfr_refine(fp, m, w, b);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
      return s;
    };
    auto g = cfr_refine_backward(fp, m, w, b, probe);
    auto rep = gradcheck_params(loss, {{&w, &g.weight}, {&b, &g.bias}, {&fp, &g.fp}, {&m, &g.mask}});
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error << " at " << rep.worst_index;
  }
}

// Near one-hot masks: category c wins where channel 0 is in its band.
SanState<double> hard_mask_state(std::size_t C, std::size_t K) {
  auto st = SanState<double>::zeros(C, K);
  for (std::size_t c = 0; c <= C; ++c) st.cls_weight[c * K + c % K] = 60.0;
  return st;
}

TEST(SanForwardTest, ReducesToInstanceNorm) {
  SeededRng r(5);
  auto f = Tensor<double>::uniform({2, 3, 5, 5}, -2, 2, r);
  auto st = SanState<double>::zeros(1, 3);
  st.gamma[0] = 1;
  st.cls_bias[0] = 50;  // mask of category 0 == 1 everywhere
  SanRegions full{std::vector<RegionMask>(2, RegionMask::full(5, 5))};
  for (bool cfr : {true, false}) {
    SanOptions opts;
    opts.cfr = cfr;  // zero CFR weights gate by 0.5, which RN removes
    auto out = san_forward(f, st, opts, Mode::infer, &full);
    EXPECT_LT(max_abs_diff(out.output, instance_normalize(f)), 1e-4);
  }
}

TEST(SanForwardTest, CategoryAffine) {
  auto f = Tensor<double>::from_values({1, 1, 1, 2}, {2, 4});
  auto st = SanState<double>::zeros(1, 1);
  st.gamma[0] = 2;
  st.beta[0] = 1;
  st.cls_bias[0] = 50;
  SanOptions opts;
  opts.cfr = false;
  SanRegions full{std::vector<RegionMask>(1, RegionMask::full(1, 2))};
  auto out = san_forward(f, st, opts, Mode::infer, &full);
  EXPECT_NEAR(out.output[0], -1.0, 1e-4);
  EXPECT_NEAR(out.output[1], 3.0, 1e-4);
}

// Reference assembly from the standalone operators.
Tensor<double> san_by_composition(const Tensor<double>& f, const SanState<double>& st,
                                  const SanOptions& opts, const SanRegions& regions) {
  const std::size_t C = st.num_categories, N = f.dim(0), K = f.dim(1), HW = f.dim(2) * f.dim(3);
  auto pred = predict_masks(f, st);
  Tensor<double> out = mask_branch(f, pred.masks, C - 1);  // placeholder shape
  out.fill(0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < HW; ++i) out.plane(n, k)[i] = f.plane(n, k)[i] * pred.masks.plane(n, C)[i];
  for (std::size_t c = 0; c < C; ++c) {
    auto fp = mask_branch(f, pred.masks, c);
    Tensor<double> mc({N, 1, f.dim(2), f.dim(3)});
    for (std::size_t n = 0; n < N; ++n) std::copy_n(pred.masks.plane(n, c), HW, mc.plane(n, 0));
    auto fpp = opts.cfr ? cfr_refine(fp, mc, st.cfr_weight[c], st.cfr_bias[c]) : fp;
    auto rn = regional_normalize<double>(fpp, regions[c], opts.norm);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < HW; ++i) {
          const double v = rn.plane(n, k)[i];
          out.plane(n, k)[i] += regions[c][n].inside[i] ? v * st.gamma[c] + st.beta[c] : v;
        }
  }
  return out;
}

TEST(SanForwardTest, FusedPathMatchesOperatorComposition) {
  SeededRng r(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto f = Tensor<double>::uniform({2, 4, 6, 6}, 0, 2, r);
    auto st = SanState<double>::init(2, 4, r);
    for (std::size_t c = 0; c < 2; ++c) {
      st.gamma[c] = r.uniform(0.5, 1.5);
      st.beta[c] = r.uniform(-0.5, 0.5);
    }
    for (bool cfr : {true, false}) {
      SanOptions opts;
      opts.cfr = cfr;
      opts.region = RegionConfig{3, 1, 50};
      auto fused = san_forward(f, st, opts);
      // The fused partition must match partitioning the explicit branch.
      auto pred = predict_masks(f, st);
      for (std::size_t c = 0; c < 2; ++c) {
        auto fp = mask_branch(f, pred.masks, c);
        Tensor<double> mc({2, 1, 6, 6});
        for (std::size_t n = 0; n < 2; ++n) std::copy_n(pred.masks.plane(n, c), 36, mc.plane(n, 0));
        auto fpp = cfr ? cfr_refine(fp, mc, st.cfr_weight[c], st.cfr_bias[c]) : fp;
        auto regions = partition_region(fpp, opts.region);
        for (std::size_t n = 0; n < 2; ++n) EXPECT_EQ(regions[n], fused.cache.regions[c][n]);
      }
      auto ref = san_by_composition(f, st, opts, fused.cache.regions);
      EXPECT_LT(max_abs_diff(fused.output, ref), 1e-10);
    }
  }
}

TEST(SanForwardTest, ShapeAndModeInvariance) {
  SeededRng r(7);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t C = 1 + r.below(3), K = C * (1 + r.below(3));
    auto f = Tensor<float>::uniform({1 + r.below(2), K, 6, 7}, 0, 1, r);
    auto st = SanState<float>::init(C, K, r);
    auto a = san_forward(f, st, SanOptions{}, Mode::train);
    auto b = san_forward(f, st, SanOptions{}, Mode::infer);
    EXPECT_EQ(a.output.dims(), f.dims());
    EXPECT_EQ(a.output, b.output);
  }
}

TEST(SanForwardTest, RegionalStandardizationUnderHardMasks) {
  SeededRng r(8);
  const std::size_t C = 2, K = 4, H = 12, W = 12;
  for (int trial = 0; trial < 5; ++trial) {
    auto f = Tensor<double>::uniform({2, K, H, W}, 0.5, 2.0, r);
    // Channel c selects category c in its band of rows; channel 2 drives "other".
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t owner = h < 4 ? 0 : (h < 8 ? 1 : 2);
          for (std::size_t c = 0; c < 3; ++c) f(n, c, h, w) = c == owner ? 1.0 : 0.0;
        }
    auto st = hard_mask_state(C, K);
    st.gamma.fill(1);
    SanOptions opts;
    auto out = san_forward(f, st, opts);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < 2; ++n) {
        const auto& reg = out.cache.regions[c][n];
        ASSERT_GT(reg.count(), 1u);
        for (std::size_t k = 0; k < K; ++k) {
          double m = 0, s = 0;
          const double cnt = static_cast<double>(reg.count());
          for (std::size_t i = 0; i < H * W; ++i)
            if (reg.inside[i]) m += out.output.plane(n, k)[i];
          m /= cnt;
          for (std::size_t i = 0; i < H * W; ++i)
            if (reg.inside[i]) s += std::pow(out.output.plane(n, k)[i] - m, 2);
          s = std::sqrt(s / cnt);
          EXPECT_LT(std::abs(m), 1e-3);
          // Channels that are constant inside the region standardize to 0.
          const auto plane_stats = detail::masked_stats(f.plane(n, k), reg.inside.data(), H * W);
          if (plane_stats.std > 1e-3) {
            EXPECT_LT(std::abs(s - 1.0), 1e-2);
          }
        }
      }
  }
}

TEST(ObjectiveFeaturesTest, Examples) {
  auto f = Tensor<double>::from_values({1, 1, 1, 3}, {2, 4, 9});
  LabelMap labels = LabelMap::from_values({1, 1, 3}, {0, 0, 1});
  auto st = SanState<double>::zeros(1, 1);
  st.gamma[0] = 2;
  st.beta[0] = 1;
  auto obj = objective_features(f, labels, st, SanOptions{});
  EXPECT_NEAR(obj[0], -1.0, 1e-4);
  EXPECT_NEAR(obj[1], 3.0, 1e-4);
  EXPECT_EQ(obj[2], 9.0);  // "other" pixel (label >= C) copies F

  SeededRng r(9);
  auto g = Tensor<double>::uniform({1, 3, 4, 4}, -1, 1, r);
  LabelMap single({1, 4, 4}, 0);
  auto st1 = SanState<double>::zeros(1, 3);
  st1.gamma.fill(1);
  EXPECT_LT(max_abs_diff(objective_features(g, single, st1, SanOptions{}), instance_normalize(g)), 1e-12);
}

TEST(SanLossTest, Examples) {
  Tensor<double> out({1, 1, 1, 2});
  Tensor<double> logits({1, 2, 1, 2});
  LabelMap lab = LabelMap::from_values({1, 1, 2}, {0, 0});
  auto l = san_loss(out, out, logits, lab);
  EXPECT_NEAR(l.loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(l.loss, 0.6931, 1e-4);

  Tensor<double> hard({1, 2, 1, 2});
  hard.plane(0, 0)[0] = hard.plane(0, 0)[1] = 50;
  EXPECT_NEAR(san_loss(out, out, hard, lab).loss, 0.0, 1e-12);

  auto a = Tensor<double>::from_values({1, 1, 1, 2}, {1, -1});
  auto l1 = san_loss(a, out, hard, lab);
  EXPECT_NEAR(l1.l1, 1.0, 1e-12);
}

TEST(SanLossTest, L1IsMeanOverChannelsOfCountedPixels) {
  SeededRng r(12);
  auto a = Tensor<double>::uniform({2, 3, 2, 2}, -1, 1, r);
  auto b = Tensor<double>::uniform({2, 3, 2, 2}, -1, 1, r);
  Tensor<double> logits({2, 3, 2, 2});  // C = 2
  LabelMap lab = LabelMap::from_values({2, 2, 2}, {0, 1, 2, 3, 1, 1, 0, 2});
  double sum = 0;
  int counted = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      if (lab[n * 4 + i] >= 2) continue;
      ++counted;
      for (std::size_t k = 0; k < 3; ++k) sum += std::abs(a.plane(n, k)[i] - b.plane(n, k)[i]);
    }
  EXPECT_NEAR(san_loss(a, b, logits, lab).l1, sum / (3.0 * counted), 1e-12);
}

// Full SAN training objective with a random probe on the output, regions frozen.
struct SanObjective {
  Tensor<double> f;
  SanState<double> st;
  SanOptions opts;
  LabelMap labels;
  Tensor<double> probe;
  SanRegions regions;

  double loss() const {
    auto fw = san_forward(f, st, opts, Mode::train, &regions);
    auto obj = objective_features(f, labels, st, opts);
    auto l = san_loss(fw.output, obj, fw.cache.logits, labels);
    double s = l.loss;
    for (std::size_t i = 0; i < probe.size(); ++i) s += probe[i] * fw.output[i];
    return s;
  }
  double min_l1_residual() const {
    auto fw = san_forward(f, st, opts, Mode::train, &regions);
    auto obj = objective_features(f, labels, st, opts);
    const std::size_t HW = f.dim(2) * f.dim(3);
    double m = 1e300;
    for (std::size_t n = 0; n < f.dim(0); ++n)
      for (std::size_t k = 0; k < f.dim(1); ++k)
        for (std::size_t i = 0; i < HW; ++i)
          if (labels[n * HW + i] < static_cast<int>(st.num_categories))
            m = std::min(m, std::abs(fw.output.plane(n, k)[i] - obj.plane(n, k)[i]));
    return m;
  }
};

TEST(SanGradientTest, AllParameterGroupsMatchFiniteDifferences) {
  SeededRng r(10);
  int checked = 0;
  for (int attempt = 0; attempt < 50 && checked < 3; ++attempt) {
    SanObjective o;
    const std::size_t C = 2, K = 4;
    o.f = Tensor<double>::uniform({1, K, 6, 6}, 0, 2, r);
    o.st = SanState<double>::init(C, K, r);
    for (auto& w : o.st.cfr_weight) w = Tensor<double>::uniform({1, 3, 3, 3}, -0.5, 0.5, r);
    o.st.cls_weight = Tensor<double>::uniform({C + 1, K, 1, 1}, -1, 1, r);
    for (std::size_t c = 0; c < C; ++c) {
      o.st.gamma[c] = r.uniform(0.5, 1.5);
      o.st.beta[c] = r.uniform(-0.5, 0.5);
    }
    o.opts.cfr = checked != 2;  // exercise the no-CFR path once
    o.opts.region = RegionConfig{3, 1, 50};
    o.labels = LabelMap({1, 6, 6});
    for (auto& v : o.labels.values()) v = static_cast<int>(r.below(C + 2));  // includes "other"
    o.probe = Tensor<double>::uniform({1, K, 6, 6}, -0.1, 0.1, r);
    o.regions = san_forward(o.f, o.st, o.opts).cache.regions;
    if (o.min_l1_residual() < 1e-3) continue;

    auto fw = san_forward(o.f, o.st, o.opts, Mode::train, &o.regions);
    auto obj = objective_features(o.f, o.labels, o.st, o.opts);
    auto l = san_loss(fw.output, obj, fw.cache.logits, o.labels);
    auto dout = l.grad_output;
    axpy(1.0, o.probe, dout);
    auto g = san_backward(o.f, o.st, o.opts, fw.cache, dout, l.grad_logits);
    auto go = objective_features_backward(o.f, o.labels, o.st, o.opts, l.grad_objective);
    axpy(1.0, go.input, g.input);
    axpy(1.0, go.gamma, g.params.gamma);
    axpy(1.0, go.beta, g.params.beta);

    std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> pg{{&o.f, &g.input}};
    auto params = o.st.params();
    auto grads = g.params.params();
    for (std::size_t i = 0; i < params.size(); ++i) pg.emplace_back(params[i].second, grads[i].second);
    auto rep = gradcheck_params([&] { return o.loss(); }, pg);
    EXPECT_TRUE(rep.passed()) << "max rel err " << rep.max_rel_error << " at " << rep.worst_index
                              << " analytic " << rep.worst_analytic << " numeric " << rep.worst_numeric;
    ++checked;
  }
  EXPECT_EQ(checked, 3);
}

TEST(SanTrainingTest, OverfitsSingleBatch) {
  SeededRng r(11);
  const std::size_t C = 2, K = 4, H = 8, W = 8;
  auto f = Tensor<double>::uniform({1, K, H, W}, 0.5, 1.5, r);
  LabelMap labels({1, H, W});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const int y = h < 3 ? 0 : (h < 6 ? 1 : 2);
      labels[h * W + w] = y;
      f(0, static_cast<std::size_t>(y), h, w) += 1.0;
    }
  auto st = SanState<double>::init(C, K, r);
  SanOptions opts;
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    auto fw = san_forward(f, st, opts);
    auto obj = objective_features(f, labels, st, opts);
    auto l = san_loss(fw.output, obj, fw.cache.logits, labels);
    if (step == 0) first = l.l1;
    last = l.l1;
    auto g = san_backward(f, st, opts, fw.cache, l.grad_output, l.grad_logits);
    auto go = objective_features_backward(f, labels, st, opts, l.grad_objective);
    axpy(1.0, go.gamma, g.params.gamma);
    axpy(1.0, go.beta, g.params.beta);
    auto ps = st.params();
    auto gs = g.params.params();
    for (std::size_t i = 0; i < ps.size(); ++i) axpy(-0.05, *gs[i].second, *ps[i].second);
  }
  EXPECT_LT(last, 0.1 * first) << "first " << first << " last " << last;
}

}  // namespace
}  // namespace semaware
