// Trains a baseline and a SAN+SAW model on a small synthetic benchmark and
// prints per-domain mIoU for both.
#include <cstdlib>
#include <iostream>

#include "semaware/experiment.hpp"

int main(int argc, char** argv) {
  using namespace semaware;
  const std::size_t iters = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;

  BenchmarkOptions data;
  data.seed = 1;
  data.n_train = 64;
  data.n_test_per_domain = 16;
  const Bundle bundle = gen_benchmark(data);

  RunConfig cfg;
  cfg.seed = 1;
  cfg.train.iters = iters;
  cfg.train.lr0 = 5e-3;
  cfg.train.lambda_san = 0.1;
  cfg.train.lambda_saw = 0.01;

  for (const auto& v : component_variants()) {
    if (v.name != "baseline" && v.name != "san+saw") continue;
    const auto rec = run_experiment(variant_config(cfg, v, cfg.seed), bundle).record;
    std::cout << v.name << ":";
    for (const auto& s : rec.scores) std::cout << " " << s.split << "=" << 100.0 * s.iou.mean;
    std::cout << "\n  step " << 1000.0 * rec.step_seconds << " ms, inference " << rec.infer_ms << " ms/image\n";
  }
}
