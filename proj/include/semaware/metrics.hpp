#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "semaware/norm_whiten.hpp"
#include "semaware/saw.hpp"
#include "semaware/softmax.hpp"
#include "semaware/tensor.hpp"

namespace semaware {

// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : num_classes(classes), counts(classes * classes, 0) {}

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * num_classes + pred]; }

  void add(const LabelMap& preds, const LabelMap& gts) {
    if (preds.dims() != gts.dims()) {
      throw std::invalid_argument("ConfusionMatrix: prediction shape " + shape_str(preds.dims()) +
                                  " does not match ground truth " + shape_str(gts.dims()));
    }
    const auto nc = static_cast<std::int32_t>(num_classes);
    for (std::size_t i = 0; i < gts.size(); ++i) {
      const std::int32_t g = gts[i], p = preds[i];
      if (g < 0 || g >= nc || p < 0 || p >= nc) {
        throw std::invalid_argument("ConfusionMatrix: label out of range at pixel " + std::to_string(i));
      }
      ++counts[static_cast<std::size_t>(g) * num_classes + static_cast<std::size_t>(p)];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.num_classes != num_classes) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct IouResult {
  std::vector<std::optional<double>> per_class;  // empty when the class is absent from both maps
  double mean = 0.0;                             // over present classes; NaN if none
};

inline IouResult iou_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes;
  IouResult r;
  r.per_class.resize(C);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::size_t o = 0; o < C; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *r.per_class[c];
    ++present;
  }
  r.mean = present ? sum / static_cast<double>(present) : std::nan("");
  return r;
}

inline IouResult miou(const LabelMap& preds, const LabelMap& gts, std::size_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(preds, gts);
  return iou_from_confusion(cm);
}

// Features of one domain at some stage, with labels at the same resolution.
template <typename T>
struct DomainFeatures {
  std::string domain;
  Tensor<T> features;  // (N, K, H, W)
  LabelMap labels;     // (N, H, W)
};

struct CategoryStats {
  std::size_t pixels = 0;
  std::vector<double> mean;  // per channel, over ground-truth pixels of the category
  std::vector<double> std;
};

struct AlignmentReport {
  std::size_t num_classes = 0;
  std::size_t channels = 0;
  std::vector<std::string> domains;
  // Mean pairwise L2 distance between per-domain centers; empty when fewer
  // than two domains contain the category.
  std::vector<std::optional<double>> center_distance;
  double mean_center_distance = 0.0;
  std::vector<double> offdiag;  // per domain: mean |off-diagonal| of per-sample Psi
  double mean_offdiag = 0.0;
  std::vector<std::vector<CategoryStats>> stats;  // [domain][class]
  std::vector<double> grouped_offdiag;             // per domain, only with an index matrix
};

namespace detail {

template <typename T>
double mean_abs_offdiag(std::span<const T* const> rows, std::size_t hw) {
  const std::size_t K = rows.size();
  if (K < 2) return 0.0;
  const auto cov = row_covariance<T>(rows, hw);
  double s = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j)
      if (i != j) s += std::abs(cov[i * K + j]);
  return s / static_cast<double>(K * (K - 1));
}

}  // namespace detail

template <typename T>
AlignmentReport alignment_report(std::span<const DomainFeatures<T>> dumps, std::size_t num_classes,
                                 const ChannelIndexMatrix<T>* idx = nullptr) {
  if (dumps.size() < 2) throw std::invalid_argument("alignment_report: need at least two domains");
  const std::size_t K = dumps[0].features.dim(1);
  AlignmentReport rep;
  rep.num_classes = num_classes;
  rep.channels = K;
  for (const auto& d : dumps) {
    require_rank(d.features, 4, "alignment_report");
    if (d.features.dim(1) != K) throw std::invalid_argument("alignment_report: channel count differs between domains");
    const Shape want{d.features.dim(0), d.features.dim(2), d.features.dim(3)};
    if (d.labels.dims() != want) {
      throw std::invalid_argument("alignment_report: labels " + shape_str(d.labels.dims()) +
                                  " do not match features " + shape_str(d.features.dims()));
    }
    if (idx) check_index_matrix(d.features, *idx, "alignment_report");
    rep.domains.push_back(d.domain);

    const std::size_t N = d.features.dim(0), HW = d.features.dim(2) * d.features.dim(3);
    std::vector<CategoryStats> cats(num_classes);
    std::vector<std::vector<double>> sum(num_classes, std::vector<double>(K)), sq = sum;
    for (std::size_t n = 0; n < N; ++n) {
      const std::int32_t* lab = d.labels.data() + n * HW;
      for (std::size_t k = 0; k < K; ++k) {
        const T* p = d.features.plane(n, k);
        for (std::size_t i = 0; i < HW; ++i) {
          if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= num_classes) {
            throw std::invalid_argument("alignment_report: label out of range");
          }
          const double v = p[i];
          sum[lab[i]][k] += v;
          sq[lab[i]][k] += v * v;
        }
      }
      for (std::size_t i = 0; i < HW; ++i) ++cats[lab[i]].pixels;
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (cats[c].pixels == 0) continue;
      const double cnt = static_cast<double>(cats[c].pixels);
      cats[c].mean.resize(K);
      cats[c].std.resize(K);
      for (std::size_t k = 0; k < K; ++k) {
        const double m = sum[c][k] / cnt;
        cats[c].mean[k] = m;
        cats[c].std[k] = std::sqrt(std::max(0.0, sq[c][k] / cnt - m * m));
      }
    }
    rep.stats.push_back(std::move(cats));

    double off = 0.0, goff = 0.0;
    std::vector<const T*> rows(K);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) rows[k] = d.features.plane(n, k);
      off += detail::mean_abs_offdiag<T>(rows, HW);
      if (idx) {
        const std::size_t C = idx->categories, M = idx->per_category;
        std::vector<T> buf(C * HW);
        std::vector<const T*> grows(C);
        for (std::size_t m = 0; m < M; ++m) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* src = d.features.plane(n, idx->at(c, m));
            for (std::size_t i = 0; i < HW; ++i) buf[c * HW + i] = src[i] * idx->weight_at(c, m);
            grows[c] = buf.data() + c * HW;
          }
          goff += detail::mean_abs_offdiag<T>(grows, HW) / static_cast<double>(M);
        }
      }
    }
    rep.offdiag.push_back(N ? off / static_cast<double>(N) : 0.0);
    if (idx) rep.grouped_offdiag.push_back(N ? goff / static_cast<double>(N) : 0.0);
  }

  rep.center_distance.resize(num_classes);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    double s = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < dumps.size(); ++a) {
      for (std::size_t b = a + 1; b < dumps.size(); ++b) {
        const auto &x = rep.stats[a][c], &y = rep.stats[b][c];
        if (x.pixels == 0 || y.pixels == 0) continue;
        double d2 = 0.0;
        for (std::size_t k = 0; k < K; ++k) d2 += (x.mean[k] - y.mean[k]) * (x.mean[k] - y.mean[k]);
        s += std::sqrt(d2);
        ++pairs;
      }
    }
    if (pairs == 0) continue;
    rep.center_distance[c] = s / static_cast<double>(pairs);
    total += *rep.center_distance[c];
    ++counted;
  }
  rep.mean_center_distance = counted ? total / static_cast<double>(counted) : 0.0;
  double off = 0.0;
  for (double v : rep.offdiag) off += v;
  rep.mean_offdiag = off / static_cast<double>(rep.offdiag.size());
  return rep;
}

template <typename T>
AlignmentReport alignment_report(const std::vector<DomainFeatures<T>>& dumps, std::size_t num_classes,
                                 const ChannelIndexMatrix<T>* idx = nullptr) {
  return alignment_report(std::span<const DomainFeatures<T>>(dumps), num_classes, idx);
}

// ---- metrics CSV: run_id,domain,class_id,iou,miou,center_dist,offdiag

struct MetricsRow {
  std::string run_id;
  std::string domain;
  int class_id = -1;  // -1 marks the per-domain summary row
  std::optional<double> iou;
  double miou = 0.0;
  std::optional<double> center_dist;
  std::optional<double> offdiag;
};

inline constexpr const char* kMetricsHeader = "run_id,domain,class_id,iou,miou,center_dist,offdiag";

// One row per class then the summary row. The alignment columns are filled
// when a report is given; domain_index selects its per-domain entries.
inline std::vector<MetricsRow> metrics_rows(const std::string& run_id, const std::string& domain,
                                            const IouResult& iou, const AlignmentReport* align = nullptr,
                                            std::size_t domain_index = 0) {
  std::vector<MetricsRow> rows;
  std::optional<double> off;
  if (align) off = align->offdiag.at(domain_index);
  for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
    MetricsRow r{run_id, domain, static_cast<int>(c), iou.per_class[c], iou.mean, std::nullopt, off};
    if (align && c < align->center_distance.size()) r.center_dist = align->center_distance[c];
    rows.push_back(std::move(r));
  }
  MetricsRow s{run_id, domain, -1, iou.mean, iou.mean, std::nullopt, off};
  if (align) s.center_dist = align->mean_center_distance;
  rows.push_back(std::move(s));
  return rows;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string csv_number(std::optional<double> v) {
  if (!v || std::isnan(*v)) return "";
  std::ostringstream os;
  os << std::setprecision(10) << *v;
  return os.str();
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows, bool header = true) {
  if (header) os << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    os << detail::csv_field(r.run_id) << ',' << detail::csv_field(r.domain) << ',' << r.class_id << ','
       << detail::csv_number(r.iou) << ',' << detail::csv_number(r.miou) << ',' << detail::csv_number(r.center_dist)
       << ',' << detail::csv_number(r.offdiag) << "\n";
  }
}

}  // namespace semaware
