// semaware: data generation, training, evaluation, ablations, diagnostics and
// the gradient-check suite.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "semaware/domains.hpp"
#include "semaware/experiment.hpp"
#include "semaware/gradcheck_suite.hpp"
#include "semaware/metrics.hpp"
#include "semaware/tensor_io.hpp"
#include "semaware/toynet.hpp"

namespace fs = std::filesystem;
using namespace semaware;

namespace {

// Flags that override the config file.
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> san, saw, cfr, grouping;
  std::optional<std::size_t> C, k, t, iters, batch;
  std::optional<double> epsilon, lr0, lambda_san, lambda_saw;

  void add(CLI::App& app) {
    app.add_option("--config", config, "JSON run config");
    app.add_option("--seed", seed, "run seed");
    app.add_option("--out", out, "output directory");
    app.add_option("--data", data, "dataset bundle directory");
    app.add_option("--san", san, "SAN mode")->check(CLI::IsMember({"on", "off", "aux"}));
    app.add_option("--saw", saw, "whitening loss")->check(CLI::IsMember({"on", "off"}));
    app.add_option("--cfr", cfr, "category-level refinement")->check(CLI::IsMember({"on", "off"}));
    app.add_option("--grouping", grouping, "whitening grouping")->check(CLI::IsMember({"iw", "giw", "saw"}));
    app.add_option("--C", C, "aligned categories");
    app.add_option("--k", k, "k-means clusters");
    app.add_option("--t", t, "top clusters forming a region");
    app.add_option("--epsilon", epsilon, "normalization epsilon");
    app.add_option("--iters", iters, "training iterations");
    app.add_option("--batch", batch, "batch size");
    app.add_option("--lr0", lr0, "initial learning rate");
    app.add_option("--lambda-san", lambda_san, "SAN loss weight");
    app.add_option("--lambda-saw", lambda_saw, "whitening loss weight");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (config) c = apply_config_json(read_json_file(*config));
    if (seed) c.seed = *seed;
    if (out) c.out = *out;
    if (data) c.data = *data;
    auto& m = c.model;
    if (san) m.san = parse_san_mode(*san);
    if (saw) m.saw = *saw == "on";
    if (cfr) m.cfr = *cfr == "on";
    if (grouping) m.grouping = parse_grouping(*grouping);
    if (C) m.categories = *C;
    if (k) m.region.k = *k;
    if (t) m.region.t = *t;
    if (epsilon) m.norm.epsilon = *epsilon;
    if (iters) c.train.iters = *iters;
    if (batch) c.train.batch = *batch;
    if (lr0) c.train.lr0 = *lr0;
    if (lambda_san) c.train.lambda_san = *lambda_san;
    if (lambda_saw) c.train.lambda_saw = *lambda_saw;
    c.train.seed = c.seed;
    if (c.out.empty()) c.out = "out";
    c.validate();
    return c;
  }
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_gen_data(const RunConfig& cfg, std::size_t n_train, std::size_t n_test) {
  BenchmarkOptions opt;
  opt.seed = cfg.seed;
  opt.num_classes = cfg.model.num_classes;
  opt.n_train = n_train;
  opt.n_test_per_domain = n_test;
  const auto b = gen_benchmark(opt);
  save_bundle(cfg.out, b);
  std::cout << "wrote bundle to " << cfg.out << " (" << b.train.data.size() << " train, " << b.target_tests.size()
            << " target domains)\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const auto b = make_bundle(cfg);
  RunOptions opt;
  opt.log = log_line;
  auto res = run_experiment(cfg, b, opt);
  const fs::path out = cfg.out;
  fs::create_directories(out);
  save_net(out / "checkpoint.sawm", res.net);
  save_record(out / "run.json", res.record);
  std::ostringstream csv;
  write_scores_csv(csv, "train", res.record.scores);
  write_text(out / "metrics.csv", csv.str());
  for (const auto& s : res.record.scores) std::cout << s.split << " mIoU " << 100.0 * s.iou.mean << "\n";
  std::cout << "target mean " << 100.0 * res.record.target_miou() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& predictor) {
  const auto b = make_bundle(cfg);
  std::vector<DomainScore> scores;
  if (predictor == "oracle") {
    // Predicts the ground truth itself; every present class scores 1.
    for (const Split* s : b.test_splits())
      scores.push_back({s->name, s->domain, miou(s->data.labels, s->data.labels, b.num_classes)});
  } else {
    const fs::path ck = checkpoint.empty() ? fs::path(cfg.out) / "checkpoint.sawm" : fs::path(checkpoint);
    scores = evaluate(load_net(ck, cfg.model), b);
  }
  const fs::path out = fs::path(cfg.out) / "metrics.csv";
  std::ostringstream csv;
  write_scores_csv(csv, "eval", scores);
  write_text(out, csv.str());
  for (const auto& s : scores) std::cout << s.split << " mIoU " << 100.0 * s.iou.mean << "\n";
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, std::size_t seeds, const std::string& kind) {
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(cfg.seed + i);
  const auto variants = kind == "grouping" ? grouping_variants() : component_variants();
  const fs::path out = cfg.out;
  RunOptions opt;
  opt.log = log_line;
  auto bundle_for = [&](std::uint64_t seed) {
    RunConfig c = cfg;
    c.seed = seed;
    return make_bundle(c);
  };
  const auto table = run_ablation(cfg, variants, seed_list, bundle_for, opt, [&](const RunRecord& r, const std::string& v) {
    save_record(out / "runs" / (v + "_seed" + std::to_string(r.config.seed) + ".json"), r);
  });
  print_ablation(std::cout, table);
  std::ostringstream csv;
  write_ablation_csv(csv, table);
  write_text(out / ("ablation_" + kind + ".csv"), csv.str());
  const auto checks = kind == "grouping" ? grouping_checks(table) : component_checks(table);
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

int cmd_diagnose(const RunConfig& cfg, const std::string& checkpoint, std::size_t stage, std::size_t images) {
  const auto b = make_bundle(cfg);
  const fs::path ck = checkpoint.empty() ? fs::path(cfg.out) / "checkpoint.sawm" : fs::path(checkpoint);
  const auto net = load_net(ck, cfg.model);
  const auto d = diagnose(net, b, stage, images);
  const fs::path out = fs::path(cfg.out) / "diagnose";
  fs::create_directories(out);
  for (const auto& dump : d.dumps) {
    save_tensor(out / ("features_" + dump.domain + ".sawt"), dump.features);
    save_tensor(out / ("labels_" + dump.domain + ".sawt"), dump.labels.cast<float>());
  }
  const auto& r = d.report;
  json cats = json::array();
  for (const auto& v : r.center_distance) cats.push_back(v ? json(*v) : json(nullptr));
  json stats = json::array();
  for (std::size_t di = 0; di < r.domains.size(); ++di) {
    json per = json::array();
    for (const auto& s : r.stats[di]) per.push_back({{"pixels", s.pixels}, {"mean", s.mean}, {"std", s.std}});
    stats.push_back({{"domain", r.domains[di]}, {"classes", per}});
  }
  json j{{"stage", stage},           {"domains", r.domains},       {"center_distance", cats},
         {"mean_center_distance", r.mean_center_distance},       {"offdiag", r.offdiag},
         {"mean_offdiag", r.mean_offdiag}, {"grouped_offdiag", r.grouped_offdiag}, {"stats", stats}};
  write_json_file(out / "alignment.json", j);
  std::vector<DomainScore> scores = evaluate(net, b);
  std::ostringstream csv;
  write_scores_csv(csv, "diagnose", scores, &r);
  write_text(out / "metrics.csv", csv.str());
  std::cout << "mean center distance " << r.mean_center_distance << "\nmean offdiag " << r.mean_offdiag << "\nwrote "
            << out.string() << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  GradcheckSuiteOptions o;
  o.seed = seed;
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(o)) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.op << " instances=" << c.instances
              << " max_rel_error=" << c.max_rel_error << "\n";
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-aware normalization and whitening experiments"};
  app.require_subcommand(1);
  Overrides ov;
  ov.add(app);
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "write a synthetic multi-domain dataset bundle");
  std::size_t n_train = 200, n_test = 50;
  gen->add_option("--train", n_train, "training images");
  gen->add_option("--test", n_test, "test images per domain");

  auto* train_cmd = app.add_subcommand("train", "train one model; writes checkpoint, run record and metrics");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on every test split");
  std::string checkpoint, predictor = "model";
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoint.sawm)");
  eval_cmd->add_option("--predictor", predictor, "model or oracle (ground truth)")
      ->check(CLI::IsMember({"model", "oracle"}));

  auto* ablate = app.add_subcommand("ablate", "run the ablation variants over several seeds");
  std::size_t seeds = 3;
  std::string kind = "components";
  ablate->add_option("--seeds", seeds, "number of seeds, starting at --seed")->check(CLI::PositiveNumber);
  ablate->add_option("--kind", kind, "components (baseline/san/saw/san+saw) or grouping (iw/giw/saw)")
      ->check(CLI::IsMember({"components", "grouping"}));

  auto* diag = app.add_subcommand("diagnose", "dump stage features and the alignment report");
  std::size_t stage = 2, images = 16;
  diag->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoint.sawm)");
  diag->add_option("--stage", stage, "stage tap (1 or 2)")->check(CLI::Range(1, 2));
  diag->add_option("--images", images, "images per domain");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operator");

  CLI11_PARSE(app, argc, argv);

  try {
    if (grad->parsed()) return cmd_gradcheck(ov.seed.value_or(0));
    const RunConfig cfg = ov.resolve();
    if (gen->parsed()) return cmd_gen_data(cfg, n_train, n_test);
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint, predictor);
    if (ablate->parsed()) return cmd_ablate(cfg, seeds, kind);
    if (diag->parsed()) return cmd_diagnose(cfg, checkpoint, stage, images);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
