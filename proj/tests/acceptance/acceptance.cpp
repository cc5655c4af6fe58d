// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--protocol file.json] [--out dir] [--seeds 3] [--only 1,2,...] [--strict]
//
// Exit status is 0 once every selected criterion has been evaluated; --strict
// also turns any FAIL into a non-zero status.

#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "../oracles.hpp"
#include "semaware/experiment.hpp"
#include "semaware/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace semaware;
using namespace semaware::testing;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string secs(double s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << s << " s";
  return os.str();
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: operator oracles

Outcome operator_oracles() {
  SeededRng r(101);
  double cov_err = 0, iw_err = 0, giw_err = 0, saw_err = 0, km_err = 0, conv_err = 0, iou_err = 0;
  std::size_t index_mismatch = 0, count_mismatch = 0, cases = 0;

  for (int trial = 0; trial < 40; ++trial, ++cases) {
    const std::size_t K = 1 + r.below(6), HW = 1 + r.below(30);
    auto f = Tensor<double>::uniform({K, 1, HW}, -2, 2, r);
    const auto cov = covariance(f);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b)
        cov_err = std::max(cov_err, std::abs(cov(a, b) - brute_cov(f.data() + a * HW, f.data() + b * HW, HW)));
  }
  for (int trial = 0; trial < 40; ++trial, ++cases) {
    const std::size_t N = 1 + r.below(3), groups = 1 + r.below(4), K = groups * (1 + r.below(3));
    auto f = Tensor<double>::uniform({N, K, 1 + r.below(4), 1 + r.below(4)}, -2, 2, r);
    iw_err = std::max(iw_err, std::abs(iw_loss(f, false).loss - brute_iw_loss(f)));
    giw_err = std::max(giw_err, std::abs(giw_loss(f, groups, false).loss - brute_giw_loss(f, groups)));
  }
  for (int trial = 0; trial < 40; ++trial, ++cases) {
    const std::size_t C = 1 + r.below(4), K = C * (1 + r.below(4));
    auto w = Tensor<double>::uniform({C, K}, -1, 1, r);
    if (trial % 2)
      for (auto& v : w.values()) v = std::round(v * 2) / 2;  // ties and shared channels
    const auto idx = select_channel_indexes(w);
    const auto pick = brute_select(w);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t m = 0; m < K / C; ++m) index_mismatch += idx.at(c, m) != pick[c][m];
    auto f = Tensor<double>::uniform({1 + r.below(3), K, 1 + r.below(4), 1 + r.below(4)}, -2, 2, r);
    saw_err = std::max(saw_err, std::abs(saw_loss(f, idx, false).loss - brute_saw_loss(f, w)));
  }
  {
    // The same channel selected by two categories.
    const auto w = Tensor<double>::from_values({2, 4}, {0.9, 0.1, 0.2, 0.3, 0.8, 0.1, 0.5, 0.2});
    auto f = Tensor<double>::uniform({2, 4, 3, 3}, -2, 2, r);
    saw_err = std::max(saw_err, std::abs(saw_loss(f, select_channel_indexes(w), false).loss - brute_saw_loss(f, w)));
    ++cases;
  }
  for (int trial = 0; trial < 100; ++trial, ++cases) {
    // Balanced, well separated blobs (Lloyd is a local method).
    const std::size_t k = 2 + r.below(4), per = 1 + r.below(64 / k), n = k * per;
    std::vector<double> centers, v(n);
    for (std::size_t j = 0; j < k; ++j) centers.push_back(static_cast<double>(j) * 3.0 + r.uniform(0, 1));
    for (std::size_t i = 0; i < n; ++i) v[i] = centers[i % k] + r.uniform(-0.4, 0.4);
    for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[r.below(i)]);
    km_err = std::max(km_err, std::abs(lloyd_cost(v, kmeans_1d<double>(v, k)) - dp_kmeans(v, k).cost));
  }
  for (int trial = 0; trial < 20; ++trial, ++cases) {
    const std::size_t k = trial % 2 ? 1 : 3;
    auto x = Tensor<double>::uniform({1 + r.below(2), 1 + r.below(4), 1 + r.below(9), 1 + r.below(9)}, -1, 1, r);
    auto w = Tensor<double>::uniform({1 + r.below(4), x.dim(1), k, k}, -1, 1, r);
    auto b = Tensor<double>::uniform({w.dim(0)}, -1, 1, r);
    conv_err = std::max(conv_err, max_abs_diff(conv2d(x, w, b), brute_conv(x, w, b)));
  }
  for (int trial = 0; trial < 40; ++trial, ++cases) {
    const std::size_t classes = 2 + r.below(5), n = 1 + r.below(200);
    std::vector<std::int32_t> p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = static_cast<std::int32_t>(r.below(classes));
      p[i] = r.uniform(0, 1) < 0.6 ? g[i] : static_cast<std::int32_t>(r.below(classes));
    }
    const auto got = miou(LabelMap::from_values({1, 1, n}, p), LabelMap::from_values({1, 1, n}, g), classes);
    const auto want = brute_iou(p, g, classes);
    double sum = 0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      count_mismatch += got.per_class[c].has_value() != want[c].has_value();
      if (got.per_class[c] && want[c]) {
        iou_err = std::max(iou_err, std::abs(*got.per_class[c] - *want[c]));
        sum += *want[c];
        ++present;
      }
    }
    iou_err = std::max(iou_err, std::abs(got.mean - sum / static_cast<double>(present)));
  }

  const double worst = std::max({cov_err, iw_err, giw_err, saw_err, km_err, conv_err, iou_err});
  Outcome o;
  o.passed = worst < 1e-5 && index_mismatch == 0 && count_mismatch == 0;
  o.detail = std::to_string(cases) + " cases; max abs err cov " + sci(cov_err) + ", iw " + sci(iw_err) + ", giw " +
             sci(giw_err) + ", saw " + sci(saw_err) + ", kmeans " + sci(km_err) + ", conv " + sci(conv_err) +
             ", miou " + sci(iou_err) + "; index mismatches " + std::to_string(index_mismatch) +
             ", presence mismatches " + std::to_string(count_mismatch);
  return o;
}

// ---- 2: gradient suite

Outcome gradient_suite() {
  std::size_t failed = 0;
  double worst = 0;
  std::string names;
  const auto cases = run_gradcheck_suite({});
  for (const auto& c : cases) {
    worst = std::max(worst, c.max_rel_error);
    if (!c.passed) {
      ++failed;
      names += " " + c.op;
    }
  }
  Outcome o;
  o.passed = failed == 0;
  o.detail = std::to_string(cases.size()) + " operators, " + std::to_string(failed) + " failed" +
             (failed ? " (" + names.substr(1) + ")" : std::string{}) + "; max rel err " + sci(worst);
  return o;
}

// ---- 3: normalization properties

template <typename T>
std::pair<double, double> plane_mean_std(const T* p, const std::uint8_t* inside, std::size_t hw) {
  double m = 0, s = 0, n = 0;
  for (std::size_t i = 0; i < hw; ++i)
    if (!inside || inside[i]) {
      m += p[i];
      ++n;
    }
  m /= n;
  for (std::size_t i = 0; i < hw; ++i)
    if (!inside || inside[i]) s += (p[i] - m) * (p[i] - m);
  return {m, std::sqrt(s / n)};
}

Outcome normalization_properties() {
  SeededRng r(103);
  double in_mean = 0, in_std = 0, rn_mean = 0, rn_std = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto f = Tensor<float>::uniform({2, 4, 8 + r.below(9), 8 + r.below(9)}, -3, 5, r);
    const auto g = instance_normalize(f);
    const std::size_t HW = f.dim(2) * f.dim(3);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < 4; ++k) {
        const auto [m, s] = plane_mean_std(g.plane(n, k), nullptr, HW);
        in_mean = std::max(in_mean, std::abs(m));
        in_std = std::max(in_std, std::abs(s - 1.0));
      }
  }

  // Hard masks: category c owns a band of rows, the rest goes to "other".
  const std::size_t C = 2, K = 4, H = 12, W = 12;
  std::size_t regions = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto f = Tensor<double>::uniform({2, K, H, W}, 0.5, 2.0, r);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t owner = h < 4 ? 0 : (h < 8 ? 1 : 2);
          for (std::size_t c = 0; c < 3; ++c) f(n, c, h, w) = c == owner ? 1.0 : 0.0;
        }
    auto st = SanState<double>::zeros(C, K);
    for (std::size_t c = 0; c <= C; ++c) st.cls_weight[c * K + c % K] = 60.0;
    st.gamma.fill(1);
    const auto out = san_forward(f, st, SanOptions{});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t n = 0; n < 2; ++n) {
        const auto& reg = out.cache.regions[c][n];
        if (reg.count() < 2) continue;
        ++regions;
        for (std::size_t k = 0; k < K; ++k) {
          const auto [m, s] = plane_mean_std(out.output.plane(n, k), reg.inside.data(), H * W);
          rn_mean = std::max(rn_mean, std::abs(m));
          // Channels constant inside the region standardize to 0.
          const auto [m0, s0] = plane_mean_std(f.plane(n, k), reg.inside.data(), H * W);
          if (s0 > 1e-3) rn_std = std::max(rn_std, std::abs(s - 1.0));
        }
      }
  }
  Outcome o;
  o.passed = in_mean < 1e-5 && in_std < 1e-4 && rn_mean < 1e-3 && rn_std < 1e-2 && regions > 0;
  o.detail = "instance |mean| " + sci(in_mean) + ", |std-1| " + sci(in_std) + "; " + std::to_string(regions) +
             " regions |mean| " + sci(rn_mean) + ", |std-1| " + sci(rn_std);
  return o;
}

// ---- 4: SAW transparency

Outcome saw_transparency() {
  BenchmarkOptions bo;
  bo.seed = 104;
  bo.height = bo.width = 32;
  bo.n_train = 16;
  bo.n_test_per_domain = 8;
  const auto b = gen_benchmark(bo);
  std::size_t compared = 0, differing = 0;
  for (auto san : {SanMode::on, SanMode::aux}) {
    ModelConfig mc;
    mc.san = san;
    mc.saw = true;
    SeededRng r(104);
    auto with = ToyNet<float>::init(mc, r);
    TrainConfig tc;
    tc.iters = 20;
    tc.lr0 = 5e-3;
    tc.lambda_san = 0.5;
    tc.lambda_saw = 0.5;
    tc.seed = 104;
    train(with, b.train.data, tc);
    auto without = with;
    without.cfg.saw = false;
    for (const Split* s : b.test_splits()) {
      const auto a = forward(with, s->data.images, Mode::infer).logits;
      const auto c = forward(without, s->data.images, Mode::infer).logits;
      compared += a.size();
      for (std::size_t i = 0; i < a.size(); ++i) {
        differing += std::memcmp(&a[i], &c[i], sizeof(float)) != 0;
      }
      differing += !(predict(with, s->data) == predict(without, s->data));
    }
  }
  Outcome o;
  o.passed = differing == 0 && compared > 0;
  o.detail = std::to_string(compared) + " logits compared bitwise after SAW training, " + std::to_string(differing) +
             " differ";
  return o;
}

// ---- 5-9: experiments

Outcome from_checks(const std::vector<CriterionCheck>& checks) {
  Outcome o{true, ""};
  for (const auto& c : checks) {
    o.passed = o.passed && c.passed;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string(c.passed ? "" : "NOT ") + c.detail;
  }
  return o;
}

void save_table(const fs::path& out, const std::string& kind, const AblationTable& t) {
  fs::create_directories(out);
  std::ofstream csv(out / ("ablation_" + kind + ".csv"));
  write_ablation_csv(csv, t);
  std::ofstream txt(out / ("ablation_" + kind + ".txt"));
  print_ablation(txt, t);
  for (const auto& row : t.rows)
    for (const auto& run : row.runs)
      save_record(out / "runs" / (kind + "_" + row.name + "_seed" + std::to_string(run.config.seed) + ".json"), run);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string protocol_path = SEMAWARE_ACCEPTANCE_PROTOCOL, out_dir = "acceptance_out";
  std::size_t seeds = 3;
  std::vector<int> only;
  bool strict = false;
  std::optional<std::size_t> iters;
  app.add_option("--protocol", protocol_path, "run config shared by every experiment");
  app.add_option("--out", out_dir, "where tables and run records go");
  app.add_option("--seeds", seeds, "seeds per ablation row")->check(CLI::PositiveNumber);
  app.add_option("--iters", iters, "override the protocol's iterations (smoke runs)");
  app.add_option("--only", only, "criteria to evaluate")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected(only.begin(), only.end());
  if (selected.empty())
    for (int i = 1; i <= 9; ++i) selected.insert(i);

  RunConfig protocol;
  try {
    protocol = parse_config(protocol_path);
    if (iters) protocol.train.iters = *iters;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  const fs::path out = out_dir;
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(protocol.seed + i);
  auto bundle_for = [&](std::uint64_t seed) {
    RunConfig c = protocol;
    c.seed = seed;
    return make_bundle(c);
  };
  RunOptions ro;
  ro.timing_repeats = 3;
  ro.log = [](const std::string& s) { std::cerr << "  " << s << std::endl; };

  int failures = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o, double seconds, double limit) {
    const bool in_time = limit <= 0 || seconds < limit;
    const bool ok = o.passed && in_time;
    failures += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << " ["
              << secs(seconds) << (limit > 0 ? " of " + secs(limit) : std::string{}) << "]" << std::endl;
  };
  auto timed = [&](int id, const std::string& name, double limit, auto&& fn) {
    if (!selected.count(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    report(id, name, o, elapsed(t0), limit);
  };

  std::cout << "protocol " << protocol_path << ": " << config_to_json(protocol).dump() << "\n";

  timed(1, "operator oracles", 30, operator_oracles);
  timed(2, "gradient suite", 120, gradient_suite);
  timed(3, "normalization properties", 10, normalization_properties);
  timed(4, "SAW transparency", 5, saw_transparency);

  std::optional<AblationTable> components;
  if (selected.count(5) || selected.count(6) || selected.count(7) || selected.count(9)) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      components = run_ablation(protocol, component_variants(), seed_list, bundle_for, ro);
      save_table(out, "components", *components);
      print_ablation(std::cout, *components);
    } catch (const std::exception& e) {
      std::cerr << "component ablation failed: " << e.what() << "\n";
    }
    const double seconds = elapsed(t0);
    auto need = [&](auto&& fn) { return components ? fn() : Outcome{false, "component ablation did not complete"}; };
    if (selected.count(5)) {
      report(5, "component ablation", need([&] {
               auto checks = component_checks(*components);
               checks.pop_back();
               return from_checks(checks);
             }),
             seconds, 45 * 60);
    }
    if (selected.count(6)) {
      report(6, "source decay", need([&] { return from_checks({component_checks(*components).back()}); }), seconds,
             0);
    }
    if (selected.count(7)) {
      report(7, "overhead", need([&] {
               const auto &base = components->row("baseline"), &full = components->row("san+saw");
               const double step = full.step_seconds / base.step_seconds, infer = full.infer_ms / base.infer_ms;
               std::ostringstream os;
               os << std::fixed << std::setprecision(2) << "train step " << 1000 * full.step_seconds << " vs "
                  << 1000 * base.step_seconds << " ms (x" << step << ", limit x1.50); inference " << full.infer_ms
                  << " vs " << base.infer_ms << " ms/image (x" << infer << ", limit x1.10)";
               return Outcome{step <= 1.5 && infer <= 1.1, os.str()};
             }),
             seconds, 0);
    }
  }

  timed(8, "grouping ablation", 0, [&] {
    const auto t = run_ablation(protocol, grouping_variants(), seed_list, bundle_for, ro);
    save_table(out, "grouping", t);
    print_ablation(std::cout, t);
    return from_checks(grouping_checks(t));
  });

  timed(9, "determinism", 0, [&] {
    const auto v = component_variants().back();
    const auto cfg = variant_config(protocol, v, seed_list.front());
    const auto b = bundle_for(seed_list.front());
    RunOptions quiet = ro;
    quiet.log = {};
    const RunRecord first =
        components ? components->row(v.name).runs.front() : run_experiment(cfg, b, quiet).record;
    const RunRecord again = run_experiment(cfg, b, quiet).record;
    const bool same = same_results(first, again);
    return Outcome{same, v.name + " seed " + std::to_string(cfg.seed) + " rerun: losses, scores and alignment " +
                             (same ? "bitwise identical" : "differ")};
  });

  std::cout << "acceptance: " << selected.size() << " criteria evaluated, " << failures << " failed\n";
  return strict && failures ? 1 : 0;
}
