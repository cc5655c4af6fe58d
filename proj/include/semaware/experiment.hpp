#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semaware/domains.hpp"
#include "semaware/metrics.hpp"
#include "semaware/toynet.hpp"

namespace semaware {

using nlohmann::json;

// Everything one training run needs.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::string data;  // bundle directory; empty generates the default benchmark from `seed`
  std::string out;   // output directory

  void validate() const {
    model.validate();
    train.validate();
  }
};

namespace detail {

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "seed",  "san",          "saw",      "cfr",    "grouping",  "C",          "k",          "t",
      "epsilon", "K1",         "K2",       "num_classes", "lr0",  "momentum",   "weight_decay", "poly_power",
      "batch", "iters",        "lambda_san", "lambda_saw", "data", "out"};
  return keys;
}

inline bool parse_switch(const json& v, const std::string& key) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "on") return true;
    if (s == "off") return false;
  }
  throw std::invalid_argument("config: '" + key + "' must be true/false or \"on\"/\"off\"");
}

template <typename V>
V get_as(const json& j, const std::string& key) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config: '" + key + "' has the wrong type");
  }
}

inline std::size_t get_count(const json& j, const std::string& key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw std::invalid_argument("config: '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace detail

// Applies the keys of `j` on top of `base`. Unknown keys are rejected by name.
// The result is not validated, so flags can still override it.
inline RunConfig apply_config_json(const json& j, RunConfig base = {}) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  const auto& keys = detail::config_keys();
  for (const auto& [key, value] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  auto& m = base.model;
  auto& t = base.train;
  if (j.contains("seed")) {
    base.seed = detail::get_as<std::uint64_t>(j, "seed");
  }
  if (j.contains("san")) m.san = parse_san_mode(detail::get_as<std::string>(j, "san"));
  if (j.contains("saw")) m.saw = detail::parse_switch(j["saw"], "saw");
  if (j.contains("cfr")) m.cfr = detail::parse_switch(j["cfr"], "cfr");
  if (j.contains("grouping")) m.grouping = parse_grouping(detail::get_as<std::string>(j, "grouping"));
  if (j.contains("C")) m.categories = detail::get_count(j, "C");
  if (j.contains("k")) m.region.k = detail::get_count(j, "k");
  if (j.contains("t")) m.region.t = detail::get_count(j, "t");
  if (j.contains("epsilon")) m.norm.epsilon = detail::get_as<double>(j, "epsilon");
  if (j.contains("K1")) m.k1 = detail::get_count(j, "K1");
  if (j.contains("K2")) m.k2 = detail::get_count(j, "K2");
  if (j.contains("num_classes")) m.num_classes = detail::get_count(j, "num_classes");
  if (j.contains("lr0")) t.lr0 = detail::get_as<double>(j, "lr0");
  if (j.contains("momentum")) t.momentum = detail::get_as<double>(j, "momentum");
  if (j.contains("weight_decay")) t.weight_decay = detail::get_as<double>(j, "weight_decay");
  if (j.contains("poly_power")) t.poly_power = detail::get_as<double>(j, "poly_power");
  if (j.contains("batch")) t.batch = detail::get_count(j, "batch");
  if (j.contains("iters")) t.iters = detail::get_count(j, "iters");
  if (j.contains("lambda_san")) t.lambda_san = detail::get_as<double>(j, "lambda_san");
  if (j.contains("lambda_saw")) t.lambda_saw = detail::get_as<double>(j, "lambda_saw");
  if (j.contains("data")) base.data = detail::get_as<std::string>(j, "data");
  if (j.contains("out")) base.out = detail::get_as<std::string>(j, "out");
  t.seed = base.seed;
  return base;
}

inline json config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  return json{{"seed", c.seed},
              {"san", to_string(m.san)},
              {"saw", m.saw},
              {"cfr", m.cfr},
              {"grouping", to_string(m.grouping)},
              {"C", m.categories},
              {"k", m.region.k},
              {"t", m.region.t},
              {"epsilon", m.norm.epsilon},
              {"K1", m.k1},
              {"K2", m.k2},
              {"num_classes", m.num_classes},
              {"lr0", t.lr0},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"poly_power", t.poly_power},
              {"batch", t.batch},
              {"iters", t.iters},
              {"lambda_san", t.lambda_san},
              {"lambda_saw", t.lambda_saw},
              {"data", c.data},
              {"out", c.out}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Reads and validates a config file; an empty object yields the defaults.
inline RunConfig parse_config(const std::filesystem::path& path) {
  RunConfig c;
  try {
    c = apply_config_json(read_json_file(path));
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return c;
}

struct DomainScore {
  std::string split;
  std::string domain;
  IouResult iou;
};

struct AlignmentSummary {
  std::size_t stage = 2;  // 1 or 2
  std::vector<std::string> domains;
  std::vector<std::optional<double>> center_distance;
  double mean_center_distance = 0.0;
  std::vector<double> offdiag;
  double mean_offdiag = 0.0;
};

struct RunRecord {
  RunConfig config;
  std::vector<LossParts> losses;  // one per step
  std::vector<DomainScore> scores;  // source test first
  double step_seconds = 0.0;      // mean over steps 100..200
  double infer_ms = 0.0;          // per image
  std::optional<AlignmentSummary> alignment;

  double source_miou() const { return scores.empty() ? std::nan("") : scores.front().iou.mean; }
  // Mean over the target splits.
  double target_miou() const {
    if (scores.size() < 2) return std::nan("");
    double s = 0.0;
    for (std::size_t i = 1; i < scores.size(); ++i) s += scores[i].iou.mean;
    return s / static_cast<double>(scores.size() - 1);
  }
};

namespace detail {

inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double number_from(const json& v) { return v.is_null() ? std::nan("") : v.get<double>(); }
inline json optional_number(const std::optional<double>& v) { return v ? number(*v) : json(nullptr); }
inline std::optional<double> optional_from(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

// Bitwise equality with every NaN equal to every other NaN.
inline bool same_double(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}
inline bool same_optional(const std::optional<double>& a, const std::optional<double>& b) {
  return a.has_value() == b.has_value() && (!a || same_double(*a, *b));
}
template <typename V, typename Eq>
bool same_range(const V& a, const V& b, Eq eq) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!eq(a[i], b[i])) return false;
  return true;
}

}  // namespace detail

inline json record_to_json(const RunRecord& r) {
  using detail::number;
  json losses = json::array();
  for (const auto& l : r.losses) {
    losses.push_back({number(l.total), number(l.ce), number(l.san[0]), number(l.san[1]), number(l.whiten[0]),
                      number(l.whiten[1])});
  }
  json scores = json::array();
  for (const auto& s : r.scores) {
    json per = json::array();
    for (const auto& v : s.iou.per_class) per.push_back(detail::optional_number(v));
    scores.push_back({{"split", s.split}, {"domain", s.domain}, {"miou", number(s.iou.mean)}, {"per_class", per}});
  }
  json j{{"format_version", 1},
         {"config", config_to_json(r.config)},
         {"loss_columns", {"total", "ce", "san1", "san2", "whiten1", "whiten2"}},
         {"losses", losses},
         {"scores", scores},
         {"timing", {{"step_seconds", number(r.step_seconds)}, {"infer_ms", number(r.infer_ms)}}}};
  if (r.alignment) {
    const auto& a = *r.alignment;
    json cd = json::array();
    for (const auto& v : a.center_distance) cd.push_back(detail::optional_number(v));
    json off = json::array();
    for (double v : a.offdiag) off.push_back(number(v));
    j["alignment"] = {{"stage", a.stage},
                      {"domains", a.domains},
                      {"center_distance", cd},
                      {"mean_center_distance", number(a.mean_center_distance)},
                      {"offdiag", off},
                      {"mean_offdiag", number(a.mean_offdiag)}};
  }
  return j;
}

inline RunRecord record_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) throw std::invalid_argument("unsupported run record version");
    RunRecord r;
    r.config = apply_config_json(j.at("config"));
    for (const auto& row : j.at("losses")) {
      if (row.size() != 6) throw std::invalid_argument("loss row needs 6 columns");
      LossParts l;
      l.total = detail::number_from(row[0]);
      l.ce = detail::number_from(row[1]);
      l.san = {detail::number_from(row[2]), detail::number_from(row[3])};
      l.whiten = {detail::number_from(row[4]), detail::number_from(row[5])};
      r.losses.push_back(l);
    }
    for (const auto& s : j.at("scores")) {
      DomainScore d;
      d.split = s.at("split").get<std::string>();
      d.domain = s.at("domain").get<std::string>();
      d.iou.mean = detail::number_from(s.at("miou"));
      for (const auto& v : s.at("per_class")) d.iou.per_class.push_back(detail::optional_from(v));
      r.scores.push_back(std::move(d));
    }
    r.step_seconds = detail::number_from(j.at("timing").at("step_seconds"));
    r.infer_ms = detail::number_from(j.at("timing").at("infer_ms"));
    if (j.contains("alignment")) {
      const auto& a = j["alignment"];
      AlignmentSummary s;
      s.stage = a.at("stage").get<std::size_t>();
      s.domains = a.at("domains").get<std::vector<std::string>>();
      for (const auto& v : a.at("center_distance")) s.center_distance.push_back(detail::optional_from(v));
      s.mean_center_distance = detail::number_from(a.at("mean_center_distance"));
      for (const auto& v : a.at("offdiag")) s.offdiag.push_back(detail::number_from(v));
      s.mean_offdiag = detail::number_from(a.at("mean_offdiag"));
      r.alignment = std::move(s);
    }
    return r;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("run record: ") + e.what());
  }
}

// Equality of everything except the wall-clock timing fields.
inline bool same_results(const RunRecord& a, const RunRecord& b) {
  using detail::same_double;
  if (config_to_json(a.config) != config_to_json(b.config)) return false;
  auto same_loss = [](const LossParts& x, const LossParts& y) {
    return same_double(x.total, y.total) && same_double(x.ce, y.ce) && same_double(x.san[0], y.san[0]) &&
           same_double(x.san[1], y.san[1]) && same_double(x.whiten[0], y.whiten[0]) &&
           same_double(x.whiten[1], y.whiten[1]);
  };
  if (!detail::same_range(a.losses, b.losses, same_loss)) return false;
  auto same_score = [](const DomainScore& x, const DomainScore& y) {
    return x.split == y.split && x.domain == y.domain && same_double(x.iou.mean, y.iou.mean) &&
           detail::same_range(x.iou.per_class, y.iou.per_class, detail::same_optional);
  };
  if (!detail::same_range(a.scores, b.scores, same_score)) return false;
  if (a.alignment.has_value() != b.alignment.has_value()) return false;
  if (a.alignment) {
    const auto &x = *a.alignment, &y = *b.alignment;
    if (x.stage != y.stage || x.domains != y.domains) return false;
    if (!detail::same_range(x.center_distance, y.center_distance, detail::same_optional)) return false;
    if (!same_double(x.mean_center_distance, y.mean_center_distance)) return false;
    if (!detail::same_range(x.offdiag, y.offdiag, same_double)) return false;
    if (!same_double(x.mean_offdiag, y.mean_offdiag)) return false;
  }
  return true;
}

inline bool operator==(const RunRecord& a, const RunRecord& b) {
  return same_results(a, b) && detail::same_double(a.step_seconds, b.step_seconds) &&
         detail::same_double(a.infer_ms, b.infer_ms);
}

inline void save_record(const std::filesystem::path& path, const RunRecord& r) {
  write_json_file(path, record_to_json(r));
}

inline RunRecord load_record(const std::filesystem::path& path) {
  try {
    return record_from_json(read_json_file(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

// The configured bundle, or the default benchmark generated from the run seed.
inline Bundle make_bundle(const RunConfig& cfg) {
  if (!cfg.data.empty()) {
    Bundle b = load_bundle(cfg.data);
    if (b.num_classes != cfg.model.num_classes) {
      throw std::invalid_argument("bundle " + cfg.data + " has " + std::to_string(b.num_classes) +
                                  " classes, config expects " + std::to_string(cfg.model.num_classes));
    }
    return b;
  }
  BenchmarkOptions opt;
  opt.seed = cfg.seed;
  opt.num_classes = cfg.model.num_classes;
  return gen_benchmark(opt);
}

inline std::vector<DomainScore> evaluate(const ToyNet<float>& net, const Bundle& b,
                                         std::vector<LabelMap>* predictions = nullptr) {
  std::vector<DomainScore> out;
  for (const Split* s : b.test_splits()) {
    auto pred = predict(net, s->data);
    out.push_back({s->name, s->domain, miou(pred, s->data.labels, b.num_classes)});
    if (predictions) predictions->push_back(std::move(pred));
  }
  return out;
}

// Mean inference milliseconds per image over `data`, best of `repeats` passes.
inline double time_inference(const ToyNet<float>& net, const Dataset& data, std::size_t repeats = 1) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)predict(net, data);
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best / static_cast<double>(std::max<std::size_t>(data.size(), 1));
}

// First `n` images of a dataset.
inline Dataset head(const Dataset& d, std::size_t n) {
  n = std::min(n, d.size());
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return Dataset{d.image_batch<float>(ids), d.label_batch(ids)};
}

// Inference-mode output of stage `stage` (1 or 2) for every image.
inline Tensor<float> stage_features(const ToyNet<float>& net, const Dataset& data, std::size_t stage,
                                    std::size_t chunk = 8) {
  if (stage < 1 || stage > 2) throw std::invalid_argument("stage must be 1 or 2");
  const std::size_t N = data.size();
  Tensor<float> out;
  for (std::size_t start = 0; start < N; start += chunk) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(N, start + chunk); ++i) ids.push_back(i);
    auto fw = forward(net, data.image_batch<float>(ids), Mode::infer);
    const auto& f = fw.stages[stage - 1].out;
    if (out.empty()) out = Tensor<float>({N, f.dim(1), f.dim(2), f.dim(3)});
    std::copy_n(f.data(), f.size(), out.data() + start * f.dim(1) * f.dim(2) * f.dim(3));
  }
  return out;
}

struct Diagnosis {
  std::vector<DomainFeatures<float>> dumps;  // one per test split
  AlignmentReport report;
};

// Stage-tap features of the first `images` test images per domain and their
// alignment report (grouped residuals under the SAW index matrix when the
// model has a classifier).
inline Diagnosis diagnose(const ToyNet<float>& net, const Bundle& b, std::size_t stage = 2, std::size_t images = 16) {
  Diagnosis d;
  for (const Split* s : b.test_splits()) {
    auto sub = head(s->data, images);
    d.dumps.push_back({s->name, stage_features(net, sub, stage), std::move(sub.labels)});
  }
  std::optional<ChannelIndexMatrix<float>> idx;
  if (net.cfg.has_classifier()) idx = select_channel_indexes(net.san[stage - 1].classifier_block());
  d.report = alignment_report(d.dumps, b.num_classes, idx ? &*idx : nullptr);
  return d;
}

inline AlignmentSummary summarize(const AlignmentReport& r, std::size_t stage) {
  return {stage, r.domains, r.center_distance, r.mean_center_distance, r.offdiag, r.mean_offdiag};
}

struct RunOptions {
  bool alignment = true;
  std::size_t align_images = 16;
  std::size_t timing_repeats = 1;
  std::function<void(const std::string&)> log;
};

struct RunOutput {
  RunRecord record;
  ToyNet<float> net;
};

// Trains from the config's seed, then scores every test split.
inline RunOutput run_experiment(const RunConfig& cfg, const Bundle& b, const RunOptions& opt = {}) {
  cfg.validate();
  if (b.num_classes != cfg.model.num_classes) throw std::invalid_argument("bundle and model disagree on classes");
  SeededRng rng(cfg.seed);
  RunOutput out{RunRecord{}, ToyNet<float>::init(cfg.model, rng)};
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  TrainHook<float> hook;
  if (opt.log) {
    hook = [&](std::size_t step, const ToyNet<float>&) { opt.log("step " + std::to_string(step) + "/" + std::to_string(tc.iters)); };
  }
  const auto tr = train(out.net, b.train.data, tc, hook, opt.log ? std::max<std::size_t>(tc.iters / 10, 1) : 0);
  auto& rec = out.record;
  rec.config = cfg;
  rec.config.train.seed = cfg.seed;
  for (const auto& s : tr.trace) rec.losses.push_back(s.loss);
  rec.step_seconds = tr.mean_step_seconds(100, 200);
  rec.scores = evaluate(out.net, b);
  rec.infer_ms = time_inference(out.net, b.source_test.data, opt.timing_repeats);
  if (opt.alignment) rec.alignment = summarize(diagnose(out.net, b, 2, opt.align_images).report, 2);
  return out;
}

inline void write_scores_csv(std::ostream& os, const std::string& run_id, const std::vector<DomainScore>& scores,
                             const AlignmentReport* align = nullptr, bool header = true) {
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto r = metrics_rows(run_id, scores[i].split, scores[i].iou, align, i);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  write_metrics_csv(os, rows, header);
}

// One row of an ablation table: a model variant run over several seeds.
struct AblationVariant {
  std::string name;
  SanMode san = SanMode::off;
  bool saw = false;
  Grouping grouping = Grouping::saw;
};

// Baseline / +SAN / +SAW / All.
inline std::vector<AblationVariant> component_variants() {
  return {{"baseline", SanMode::off, false, Grouping::iw},
          {"san", SanMode::on, false, Grouping::saw},
          {"saw", SanMode::aux, true, Grouping::saw},
          {"san+saw", SanMode::on, true, Grouping::saw}};
}

// Whitening grouping with SAN's feature transform off.
inline std::vector<AblationVariant> grouping_variants() {
  return {{"iw", SanMode::off, true, Grouping::iw},
          {"giw", SanMode::off, true, Grouping::giw},
          {"saw", SanMode::aux, true, Grouping::saw}};
}

inline RunConfig variant_config(const RunConfig& base, const AblationVariant& v, std::uint64_t seed) {
  RunConfig c = base;
  c.seed = seed;
  c.train.seed = seed;
  c.model.san = v.san;
  c.model.saw = v.saw;
  c.model.grouping = v.grouping;
  return c;
}

struct AblationRow {
  std::string name;
  std::vector<RunRecord> runs;  // one per seed
  std::vector<double> columns;  // seed-mean mIoU (percent) per test split
  double source = 0.0;          // percent
  double target = 0.0;          // percent, mean over target splits and seeds
  double step_seconds = 0.0;
  double infer_ms = 0.0;
};

struct AblationTable {
  std::vector<std::string> columns;  // test split names
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  const AblationRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw std::out_of_range("ablation table has no row '" + name + "'");
  }
};

inline AblationRow summarize_row(const std::string& name, std::vector<RunRecord> runs) {
  AblationRow row;
  row.name = name;
  row.runs = std::move(runs);
  const double S = static_cast<double>(row.runs.size());
  for (const auto& r : row.runs) {
    if (row.columns.empty()) row.columns.assign(r.scores.size(), 0.0);
    for (std::size_t i = 0; i < r.scores.size(); ++i) row.columns[i] += 100.0 * r.scores[i].iou.mean / S;
    row.source += 100.0 * r.source_miou() / S;
    row.target += 100.0 * r.target_miou() / S;
    row.step_seconds += r.step_seconds / S;
    row.infer_ms += r.infer_ms / S;
  }
  return row;
}

// Runs every variant for every seed. Bundles come from `bundle_for` (one per
// seed, shared by all variants).
inline AblationTable run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                  const std::vector<std::uint64_t>& seeds,
                                  const std::function<Bundle(std::uint64_t)>& bundle_for, const RunOptions& opt = {},
                                  const std::function<void(const RunRecord&, const std::string&)>& on_run = {}) {
  if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  AblationTable table;
  table.seeds = seeds;
  std::vector<std::vector<RunRecord>> runs(variants.size());
  for (std::uint64_t seed : seeds) {
    const Bundle b = bundle_for(seed);
    if (table.columns.empty())
      for (const Split* s : b.test_splits()) table.columns.push_back(s->name);
    for (std::size_t v = 0; v < variants.size(); ++v) {
      if (opt.log) opt.log(variants[v].name + " seed " + std::to_string(seed));
      auto r = run_experiment(variant_config(base, variants[v], seed), b, opt).record;
      if (on_run) on_run(r, variants[v].name);
      runs[v].push_back(std::move(r));
    }
  }
  for (std::size_t v = 0; v < variants.size(); ++v) table.rows.push_back(summarize_row(variants[v].name, runs[v]));
  return table;
}

inline void print_ablation(std::ostream& os, const AblationTable& t) {
  std::ostringstream head;
  head << std::left << std::setw(10) << "variant";
  for (const auto& c : t.columns) head << std::right << std::setw(14) << c;
  head << std::setw(14) << "target_mean" << std::setw(12) << "step_ms" << std::setw(12) << "infer_ms";
  os << head.str() << "\n";
  for (const auto& r : t.rows) {
    os << std::left << std::setw(10) << r.name << std::right << std::fixed << std::setprecision(2);
    for (double v : r.columns) os << std::setw(14) << v;
    os << std::setw(14) << r.target << std::setw(12) << 1000.0 * r.step_seconds << std::setw(12) << r.infer_ms
       << "\n";
  }
  os.unsetf(std::ios::floatfield);
}

inline void write_ablation_csv(std::ostream& os, const AblationTable& t) {
  os << "variant";
  for (const auto& c : t.columns) os << "," << c;
  os << ",target_mean,step_seconds,infer_ms\n";
  os << std::setprecision(10);
  for (const auto& r : t.rows) {
    os << r.name;
    for (double v : r.columns) os << "," << v;
    os << "," << r.target << "," << r.step_seconds << "," << r.infer_ms << "\n";
  }
}

struct CriterionCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string fmt2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline CriterionCheck at_least(const std::string& name, double lhs, const std::string& lhs_name, double rhs,
                               const std::string& rhs_name, double margin) {
  const bool ok = lhs >= rhs + margin;
  std::string m = margin >= 0 ? " + " + fmt2(margin) : " - " + fmt2(-margin);
  return {name, ok, lhs_name + " " + fmt2(lhs) + (ok ? " >= " : " < ") + rhs_name + " " + fmt2(rhs) + m};
}

}  // namespace detail

// Directional claims on a component table (rows baseline, san, saw, san+saw;
// mIoU in percent).
inline std::vector<CriterionCheck> component_checks(const AblationTable& t) {
  const auto &base = t.row("baseline"), &san = t.row("san"), &saw = t.row("saw"), &full = t.row("san+saw");
  using detail::at_least;
  std::vector<CriterionCheck> out{
      at_least("full >= baseline + 3", full.target, "full", base.target, "baseline", 3.0),
      at_least("san >= baseline + 1.5", san.target, "san", base.target, "baseline", 1.5),
      at_least("saw >= baseline + 1", saw.target, "saw", base.target, "baseline", 1.0),
      at_least("san >= saw - 0.5", san.target, "san", saw.target, "saw", -0.5)};
  const double drop = base.source - full.source;
  out.push_back({"source drop <= 1", std::abs(full.source - base.source) <= 1.0,
                 "full source " + detail::fmt2(full.source) + " vs baseline " + detail::fmt2(base.source) +
                     " (drop " + detail::fmt2(drop) + ")"});
  return out;
}

// iw <= giw <= saw on target mIoU, each step within `tolerance` points.
inline std::vector<CriterionCheck> grouping_checks(const AblationTable& t, double tolerance = 0.5) {
  const auto &iw = t.row("iw"), &giw = t.row("giw"), &saw = t.row("saw");
  return {detail::at_least("giw >= iw - tol", giw.target, "giw", iw.target, "iw", -tolerance),
          detail::at_least("saw >= giw - tol", saw.target, "saw", giw.target, "giw", -tolerance)};
}

}  // namespace semaware
