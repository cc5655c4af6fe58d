#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "semaware/gradcheck.hpp"
#include "semaware/metrics.hpp"
#include "test_util.hpp"

namespace semaware {
namespace {

using testing::brute_cov;
using testing::random_tensor;

LabelMap labels(Shape dims, std::vector<std::int32_t> v) { return LabelMap(std::move(dims), std::move(v)); }

TEST(Miou, TwoByTwoExample) {
  const auto gt = labels({1, 2, 2}, {0, 0, 1, 1});
  const auto pred = labels({1, 2, 2}, {0, 1, 1, 1});
  // Class 0: TP 1, FN 1. Class 1: TP 2, FP 1.
  const auto r = miou(pred, gt, 2);
  ASSERT_TRUE(r.per_class[0] && r.per_class[1]);
  EXPECT_DOUBLE_EQ(*r.per_class[0], 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.mean, 7.0 / 12.0);
}

TEST(Miou, IdenticalMapsScoreOne) {
  const auto gt = labels({2, 2, 2}, {0, 1, 1, 3, 3, 3, 0, 1});
  const auto r = miou(gt, gt, 5);
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  EXPECT_FALSE(r.per_class[2]);
  EXPECT_FALSE(r.per_class[4]);
  EXPECT_DOUBLE_EQ(*r.per_class[3], 1.0);
}

TEST(Miou, AbsentClassIsExcluded) {
  const auto gt = labels({1, 2, 2}, {0, 0, 1, 1});
  const auto pred = labels({1, 2, 2}, {0, 1, 1, 1});
  const auto with_extra = miou(pred, gt, 4);
  EXPECT_DOUBLE_EQ(with_extra.mean, 7.0 / 12.0);
  // A class predicted but never present still counts (IoU 0).
  const auto pred2 = labels({1, 2, 2}, {0, 2, 1, 1});
  const auto r = miou(pred2, gt, 3);
  ASSERT_TRUE(r.per_class[2]);
  EXPECT_DOUBLE_EQ(*r.per_class[2], 0.0);
  EXPECT_DOUBLE_EQ(r.mean, (0.5 + 1.0 + 0.0) / 3.0);
}

TEST(Miou, PermutingClassIdsPermutesIous) {
  SeededRng rng(4);
  LabelMap gt({3, 5, 5}), pred({3, 5, 5});
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = static_cast<std::int32_t>(rng.below(4));
    pred[i] = rng.uniform() < 0.6 ? gt[i] : static_cast<std::int32_t>(rng.below(4));
  }
  const std::vector<std::int32_t> perm{2, 0, 3, 1};
  LabelMap gp = gt, pp = pred;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gp[i] = perm[gt[i]];
    pp[i] = perm[pred[i]];
  }
  const auto a = miou(pred, gt, 4), b = miou(pp, gp, 4);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(*a.per_class[c], *b.per_class[perm[c]]);
  EXPECT_NEAR(a.mean, b.mean, 1e-15);
}

TEST(ConfusionMatrix, CountsSumToPixels) {
  SeededRng rng(1);
  ConfusionMatrix cm(3);
  std::size_t pixels = 0;
  for (int rep = 0; rep < 4; ++rep) {
    LabelMap gt({2, 7, 3}), pred({2, 7, 3});
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = static_cast<std::int32_t>(rng.below(3));
      pred[i] = static_cast<std::int32_t>(rng.below(3));
    }
    ConfusionMatrix part(3);
    part.add(pred, gt);
    cm.merge(part);
    pixels += gt.size();
  }
  EXPECT_EQ(cm.total(), pixels);
}

TEST(ConfusionMatrix, RejectsMismatchedShapesAndLabels) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add(labels({1, 1, 2}, {0, 1}), labels({1, 2, 1}, {0, 1})), std::invalid_argument);
  EXPECT_THROW(cm.add(labels({1, 1, 2}, {0, 2}), labels({1, 1, 2}, {0, 1})), std::invalid_argument);
}

// ---- alignment

DomainFeatures<double> domain(std::string name, Tensor<double> f, LabelMap l) {
  return {std::move(name), std::move(f), std::move(l)};
}

LabelMap random_labels(Shape dims, std::size_t classes, SeededRng& rng) {
  LabelMap l(std::move(dims));
  for (auto& v : l.values()) v = static_cast<std::int32_t>(rng.below(classes));
  return l;
}

// Category centers and their distances computed pixel by pixel.
double brute_center_distance(const DomainFeatures<double>& a, const DomainFeatures<double>& b, std::int32_t cls) {
  const std::size_t K = a.features.dim(1);
  auto center = [&](const DomainFeatures<double>& d) {
    std::vector<double> c(K, 0.0);
    double n = 0;
    const std::size_t HW = d.features.dim(2) * d.features.dim(3);
    for (std::size_t s = 0; s < d.features.dim(0); ++s)
      for (std::size_t i = 0; i < HW; ++i) {
        if (d.labels[s * HW + i] != cls) continue;
        for (std::size_t k = 0; k < K; ++k) c[k] += d.features.plane(s, k)[i];
        n += 1;
      }
    for (auto& v : c) v /= n;
    return c;
  };
  const auto ca = center(a), cb = center(b);
  double s = 0;
  for (std::size_t k = 0; k < K; ++k) s += (ca[k] - cb[k]) * (ca[k] - cb[k]);
  return std::sqrt(s);
}

TEST(Alignment, IdenticalDomainsHaveZeroDistance) {
  SeededRng rng(2);
  const auto f = random_tensor({2, 4, 5, 5}, rng);
  const auto l = random_labels({2, 5, 5}, 3, rng);
  const std::vector<DomainFeatures<double>> dumps{domain("a", f, l), domain("b", f, l)};
  const auto rep = alignment_report(dumps, 3);
  for (const auto& d : rep.center_distance) EXPECT_EQ(*d, 0.0);
  EXPECT_EQ(rep.mean_center_distance, 0.0);
  EXPECT_EQ(rep.offdiag[0], rep.offdiag[1]);
}

TEST(Alignment, SingleChannelHasNoOffdiagonal) {
  SeededRng rng(3);
  const std::vector<DomainFeatures<double>> dumps{
      domain("a", random_tensor({2, 1, 4, 4}, rng), random_labels({2, 4, 4}, 2, rng)),
      domain("b", random_tensor({2, 1, 4, 4}, rng), random_labels({2, 4, 4}, 2, rng))};
  const auto rep = alignment_report(dumps, 2);
  EXPECT_EQ(rep.offdiag[0], 0.0);
  EXPECT_EQ(rep.offdiag[1], 0.0);
}

TEST(Alignment, ShiftedDomainDistanceAndInstanceNormalization) {
  SeededRng rng(5);
  const std::size_t K = 6;
  const auto fa = random_tensor({3, K, 6, 6}, rng);
  Tensor<double> fb = fa;
  for (auto& v : fb.values()) v += 1.0;
  const auto l = random_labels({3, 6, 6}, 3, rng);
  const std::vector<DomainFeatures<double>> raw{domain("a", fa, l), domain("b", fb, l)};
  const auto before = alignment_report(raw, 3);
  for (std::int32_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(*before.center_distance[c], std::sqrt(static_cast<double>(K)), 1e-12);
    EXPECT_NEAR(*before.center_distance[c], brute_center_distance(raw[0], raw[1], c), 1e-12);
  }
  const std::vector<DomainFeatures<double>> normed{domain("a", instance_normalize(fa), l),
                                                   domain("b", instance_normalize(fb), l)};
  const auto after = alignment_report(normed, 3);
  for (std::int32_t c = 0; c < 3; ++c) EXPECT_LT(*after.center_distance[c], 1e-9);
}

TEST(Alignment, MatchesBruteForceStatistics) {
  SeededRng rng(6);
  const std::vector<DomainFeatures<double>> dumps{
      domain("a", random_tensor({2, 3, 4, 5}, rng), random_labels({2, 4, 5}, 3, rng)),
      domain("b", random_tensor({1, 3, 4, 5}, rng, 0.0, 2.0), random_labels({1, 4, 5}, 3, rng)),
      domain("c", random_tensor({2, 3, 4, 5}, rng, -2.0, 0.5), random_labels({2, 4, 5}, 3, rng))};
  const auto rep = alignment_report(dumps, 3);
  for (std::int32_t c = 0; c < 3; ++c) {
    const double want = (brute_center_distance(dumps[0], dumps[1], c) + brute_center_distance(dumps[0], dumps[2], c) +
                         brute_center_distance(dumps[1], dumps[2], c)) /
                        3.0;
    EXPECT_NEAR(*rep.center_distance[c], want, 1e-12);
  }
  for (std::size_t d = 0; d < dumps.size(); ++d) {
    const auto& f = dumps[d].features;
    const std::size_t HW = 20;
    double off = 0;
    for (std::size_t n = 0; n < f.dim(0); ++n) {
      double s = 0;
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          if (i != j) s += std::abs(brute_cov(f.plane(n, i), f.plane(n, j), HW));
      off += s / 6.0;
    }
    EXPECT_NEAR(rep.offdiag[d], off / f.dim(0), 1e-12);
  }
  for (const auto& row : rep.stats)
    for (const auto& cat : row)
      for (double s : cat.std) EXPECT_GE(s, 0.0);
}

TEST(Alignment, AbsentCategoryIsOmitted) {
  SeededRng rng(7);
  const auto f = random_tensor({1, 2, 3, 3}, rng);
  const auto only0 = labels({1, 3, 3}, std::vector<std::int32_t>(9, 0));
  auto mixed = only0;
  mixed[4] = 1;
  const std::vector<DomainFeatures<double>> dumps{domain("a", f, only0), domain("b", f, mixed)};
  const auto rep = alignment_report(dumps, 3);
  EXPECT_TRUE(rep.center_distance[0]);
  EXPECT_FALSE(rep.center_distance[1]);
  EXPECT_FALSE(rep.center_distance[2]);
  EXPECT_EQ(rep.stats[0][1].pixels, 0u);
  EXPECT_EQ(rep.stats[1][1].pixels, 1u);
}

TEST(Alignment, GroupedResidualsUnderIndexMatrix) {
  SeededRng rng(8);
  const auto f = random_tensor({2, 4, 4, 4}, rng);
  const auto l = random_labels({2, 4, 4}, 2, rng);
  // C = 2 categories, each picking two channels.
  Tensor<double> w({2, 4}, std::vector<double>{0.9, -0.2, 0.5, 0.1, 0.3, 0.8, -0.1, -0.6});
  const auto idx = select_channel_indexes(w);
  const std::vector<DomainFeatures<double>> dumps{domain("a", f, l), domain("b", f, l)};
  const auto rep = alignment_report(dumps, 2, &idx);
  ASSERT_EQ(rep.grouped_offdiag.size(), 2u);
  double want = 0;
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t m = 0; m < 2; ++m) {
      std::vector<double> a(16), b(16);
      for (std::size_t i = 0; i < 16; ++i) {
        a[i] = f.plane(n, idx.at(0, m))[i] * idx.weight_at(0, m);
        b[i] = f.plane(n, idx.at(1, m))[i] * idx.weight_at(1, m);
      }
      want += std::abs(brute_cov(a.data(), b.data(), 16)) / 2.0;
    }
  }
  EXPECT_NEAR(rep.grouped_offdiag[0], want / 2.0, 1e-12);
}

TEST(Alignment, NeedsTwoDomains) {
  SeededRng rng(9);
  const std::vector<DomainFeatures<double>> one{
      domain("a", random_tensor({1, 2, 3, 3}, rng), random_labels({1, 3, 3}, 2, rng))};
  EXPECT_THROW(alignment_report(one, 2), std::invalid_argument);
}

// ---- CSV

TEST(MetricsCsv, RowsPerClassPlusSummary) {
  const auto r = miou(labels({1, 2, 2}, {0, 1, 1, 1}), labels({1, 2, 2}, {0, 0, 1, 1}), 3);
  const auto rows = metrics_rows("run,1", "dark", r);
  ASSERT_EQ(rows.size(), 4u);
  std::ostringstream os;
  write_metrics_csv(os, rows);
  EXPECT_EQ(os.str(),
            "run_id,domain,class_id,iou,miou,center_dist,offdiag\n"
            "\"run,1\",dark,0,0.5,0.5833333333,,\n"
            "\"run,1\",dark,1,0.6666666667,0.5833333333,,\n"
            "\"run,1\",dark,2,,0.5833333333,,\n"
            "\"run,1\",dark,-1,0.5833333333,0.5833333333,,\n");
}

// ---- finite-difference harness

TEST(Gradcheck, QuadraticIsExact) {
  SeededRng rng(1);
  const auto x = random_tensor({2, 3, 4}, rng);
  const auto rep = gradcheck(
      [](const Tensor<double>& p) {
        double s = 0;
        for (double v : p.values()) s += 0.5 * v * v;
        return std::pair{s, p};
      },
      x);
  EXPECT_LT(rep.max_rel_error, 1e-8);
  EXPECT_EQ(rep.coordinates, x.size());
}

TEST(Gradcheck, InstanceWhiteningLoss) {
  SeededRng rng(2);
  for (int attempt = 0; attempt < 50; ++attempt) {
    const auto x = random_tensor({1, 3, 3, 3}, rng);
    if (testing::min_cov_residual_all(x) < 1e-3) continue;
    const auto rep = gradcheck(
        [](const Tensor<double>& p) {
          auto r = iw_loss(p);
          return std::pair{static_cast<double>(r.loss), r.grad};
        },
        x);
    EXPECT_LT(rep.max_rel_error, 1e-3);
    return;
  }
  FAIL() << "no kink-free point";
}

TEST(Gradcheck, WrongGradientIsFlagged) {
  SeededRng rng(3);
  const auto x = random_tensor({5}, rng, 0.5, 1.0);
  const auto rep = gradcheck(
      [](const Tensor<double>& p) {
        double s = 0;
        Tensor<double> g = p;
        for (double v : p.values()) s += 0.5 * v * v;
        for (auto& v : g.values()) v *= 2.0;
        return std::pair{s, g};
      },
      x);
  EXPECT_NEAR(rep.max_rel_error, 0.5, 1e-6);
  EXPECT_FALSE(rep.passed());
}

TEST(Gradcheck, NonFiniteAborts) {
  Tensor<double> x({2}, std::vector<double>{1.0, 2.0});
  EXPECT_THROW(gradcheck([](const Tensor<double>& p) { return std::pair{std::log(p[0] - 1.0), p}; }, x),
               std::runtime_error);
}

}  // namespace
}  // namespace semaware
