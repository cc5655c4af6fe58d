#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "semaware/rng.hpp"
#include "semaware/softmax.hpp"
#include "semaware/tensor.hpp"
#include "semaware/tensor_io.hpp"
#include "semaware/toynet.hpp"

namespace semaware {

using Interval = std::array<double, 2>;  // closed [lo, hi]

// Global photometric transform: clip(gain * x^gamma + bias + noise, 0, 1) per channel.
struct DomainSpec {
  std::string id;
  std::array<double, 3> channel_gain{1.0, 1.0, 1.0};
  std::array<double, 3> channel_bias{0.0, 0.0, 0.0};
  double gamma = 1.0;
  double noise_std = 0.0;

  static DomainSpec identity(std::string id = "identity") {
    DomainSpec s;
    s.id = std::move(id);
    return s;
  }

  void validate() const {
    for (double g : channel_gain) {
      if (!(g > 0.0)) throw std::invalid_argument("domain '" + id + "': gains must be > 0");
    }
    if (!(gamma >= 0.5 && gamma <= 2.0)) throw std::invalid_argument("domain '" + id + "': gamma outside [0.5, 2]");
    if (!(noise_std >= 0.0 && noise_std <= 0.1)) {
      throw std::invalid_argument("domain '" + id + "': noise_std outside [0, 0.1]");
    }
  }

  bool operator==(const DomainSpec&) const = default;
};

// Box of styles a domain's spec is drawn from.
struct StyleRange {
  std::string id;
  std::array<Interval, 3> gain{{{1, 1}, {1, 1}, {1, 1}}};
  std::array<Interval, 3> bias{{{0, 0}, {0, 0}, {0, 0}}};
  Interval gamma{1, 1};
  Interval noise{0, 0};

  std::vector<Interval> axes() const {
    return {gain[0], gain[1], gain[2], bias[0], bias[1], bias[2], gamma, noise};
  }
};

// Boxes are disjoint when some axis separates them.
inline bool ranges_disjoint(const StyleRange& a, const StyleRange& b) {
  const auto x = a.axes(), y = b.axes();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i][1] < y[i][0] || y[i][1] < x[i][0]) return true;
  }
  return false;
}

inline DomainSpec sample_spec(const StyleRange& r, SeededRng& rng) {
  DomainSpec s;
  s.id = r.id;
  for (std::size_t c = 0; c < 3; ++c) s.channel_gain[c] = rng.uniform(r.gain[c][0], r.gain[c][1]);
  for (std::size_t c = 0; c < 3; ++c) s.channel_bias[c] = rng.uniform(r.bias[c][0], r.bias[c][1]);
  s.gamma = rng.uniform(r.gamma[0], r.gamma[1]);
  s.noise_std = rng.uniform(r.noise[0], r.noise[1]);
  s.validate();
  return s;
}

inline StyleRange default_source_range() {
  StyleRange r;
  r.id = "source";
  r.gain = {{{0.9, 1.1}, {0.9, 1.1}, {0.9, 1.1}}};
  r.bias = {{{-0.05, 0.05}, {-0.05, 0.05}, {-0.05, 0.05}}};
  r.gamma = {0.9, 1.1};
  r.noise = {0.0, 0.02};
  return r;
}

inline std::vector<StyleRange> default_target_ranges() {
  StyleRange dark;
  dark.id = "dark";
  dark.gain = {{{0.45, 0.6}, {0.45, 0.6}, {0.5, 0.65}}};
  dark.bias = {{{-0.03, 0.0}, {-0.03, 0.0}, {-0.03, 0.0}}};
  dark.gamma = {1.4, 1.8};
  dark.noise = {0.02, 0.04};

  StyleRange haze;
  haze.id = "haze";
  haze.gain = {{{0.5, 0.65}, {0.5, 0.65}, {0.5, 0.65}}};
  haze.bias = {{{0.28, 0.38}, {0.28, 0.38}, {0.3, 0.4}}};
  haze.gamma = {0.7, 0.85};
  haze.noise = {0.0, 0.02};

  StyleRange tint;
  tint.id = "tint";
  tint.gain = {{{1.15, 1.3}, {0.75, 0.85}, {0.45, 0.6}}};
  tint.bias = {{{0.02, 0.08}, {0.0, 0.05}, {0.1, 0.16}}};
  tint.gamma = {0.9, 1.1};
  tint.noise = {0.03, 0.06};
  return {dark, haze, tint};
}

struct DomainSample {
  Tensor<float> image;  // (3, H, W) in [0, 1]
  LabelMap labels;      // (H, W)
  std::string domain;
  std::uint64_t scene_seed = 0;
};

namespace detail {

// Base colors by class id: background, rectangle, disk, horizontal band,
// then extra shapes for larger class counts.
inline constexpr std::array<std::array<double, 3>, 8> kClassColors{{{0.30, 0.50, 0.35},
                                                                   {0.75, 0.35, 0.30},
                                                                   {0.30, 0.40, 0.75},
                                                                   {0.80, 0.75, 0.35},
                                                                   {0.60, 0.30, 0.70},
                                                                   {0.30, 0.70, 0.70},
                                                                   {0.90, 0.90, 0.85},
                                                                   {0.15, 0.15, 0.20}}};

inline double class_texture(std::size_t cls, double y, double x, double phase) {
  switch (cls) {
    case 0: return 0.05 * std::sin(0.30 * x + phase) * std::sin(0.25 * y + 0.5 * phase);
    case 1: return ((static_cast<int>(y) / 4 + static_cast<int>(x) / 4) % 2 ? 0.04 : -0.04);
    case 2: return 0.0;  // radial texture is applied with the shape
    case 3: return 0.04 * std::sin(1.5 * y + phase);
    case 4: return 0.04 * std::sin(1.5 * x + phase);
    default: return 0.03 * std::cos(0.7 * (x + y) + phase);
  }
}

}  // namespace detail

// Layered layout in class z-order: background, rectangle, disk, horizontal
// band, vertical band, diamond, square, ring (as many as num_classes).
inline DomainSample gen_scene(std::uint64_t seed, std::size_t H, std::size_t W, std::size_t num_classes) {
  if (num_classes < 2 || num_classes > 8) throw std::invalid_argument("gen_scene: num_classes must be in 2..8");
  if (H < 32 || W < 32) throw std::invalid_argument("gen_scene: H and W must be >= 32");
  SeededRng rng(seed);
  const double h = static_cast<double>(H), w = static_cast<double>(W), m = std::min(h, w);
  DomainSample s;
  s.scene_seed = seed;
  s.labels = LabelMap({H, W}, 0);

  // Shape membership tests, one per foreground class.
  std::vector<std::function<bool(double, double)>> shapes;
  {
    const double rw = rng.uniform(0.25, 0.5) * w, rh = rng.uniform(0.25, 0.5) * h;
    const double x0 = rng.uniform(0, w - rw), y0 = rng.uniform(0, h - rh);
    shapes.push_back([=](double y, double x) { return x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh; });
  }
  {
    const double r = rng.uniform(0.12, 0.22) * m;
    const double cx = rng.uniform(r, w - r), cy = rng.uniform(r, h - r);
    shapes.push_back([=](double y, double x) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) < r * r; });
  }
  {
    const double bh = rng.uniform(0.10, 0.18) * h, y0 = rng.uniform(0, h - bh);
    shapes.push_back([=](double y, double) { return y >= y0 && y < y0 + bh; });
  }
  {
    const double bw = rng.uniform(0.08, 0.14) * w, x0 = rng.uniform(0, w - bw);
    shapes.push_back([=](double, double x) { return x >= x0 && x < x0 + bw; });
  }
  {
    const double r = rng.uniform(0.1, 0.16) * m, cx = rng.uniform(r, w - r), cy = rng.uniform(r, h - r);
    shapes.push_back([=](double y, double x) { return std::abs(x - cx) + std::abs(y - cy) < r; });
  }
  {
    const double a = rng.uniform(0.08, 0.14) * m, x0 = rng.uniform(0, w - a), y0 = rng.uniform(0, h - a);
    shapes.push_back([=](double y, double x) { return x >= x0 && x < x0 + a && y >= y0 && y < y0 + a; });
  }
  {
    const double r = rng.uniform(0.1, 0.16) * m, cx = rng.uniform(r, w - r), cy = rng.uniform(r, h - r);
    shapes.push_back([=](double y, double x) {
      const double d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
      return d < r && d > 0.6 * r;
    });
  }

  std::array<std::array<double, 3>, 8> colors = detail::kClassColors;
  for (auto& c : colors)
    for (auto& v : c) v += rng.uniform(-0.05, 0.05);
  std::array<double, 8> phase{};
  for (auto& p : phase) p = rng.uniform(0, 2 * std::numbers::pi);

  s.image = Tensor<float>({3, H, W});
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double y = static_cast<double>(i) + 0.5, x = static_cast<double>(j) + 0.5;
      std::size_t cls = 0;
      for (std::size_t k = 1; k < num_classes; ++k) {
        if (shapes[k - 1](y, x)) cls = k;
      }
      s.labels[i * W + j] = static_cast<std::int32_t>(cls);
      double tex = detail::class_texture(cls, y, x, phase[cls]);
      if (cls == 2) tex = 0.04 * std::cos(0.8 * std::hypot(x - w / 2, y - h / 2) + phase[2]);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = colors[cls][c] + tex + rng.uniform(-0.03, 0.03);
        s.image[(c * H + i) * W + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return s;
}

// Per channel clip(gain * x^gamma + bias + N(0, noise_std), 0, 1).
inline Tensor<float> apply_style(const Tensor<float>& image, const DomainSpec& spec, SeededRng& rng) {
  require_rank(image, 3, "apply_style");
  spec.validate();
  const std::size_t C = image.dim(0), HW = image.dim(1) * image.dim(2);
  if (C != 3) throw std::invalid_argument("apply_style: expected 3 channels");
  Tensor<float> out(image.dims());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < HW; ++i) {
      double v = spec.channel_gain[c] * std::pow(static_cast<double>(image[c * HW + i]), spec.gamma) +
                 spec.channel_bias[c];
      if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
      out[c * HW + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

struct Split {
  std::string name;    // e.g. "train", "test_source", "test_dark"
  std::string domain;  // spec id
  Dataset data;
  std::vector<std::uint64_t> scene_seeds;
};

struct BenchmarkOptions {
  std::uint64_t seed = 0;
  std::size_t n_train = 200;
  std::size_t n_test_per_domain = 50;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 4;
  StyleRange source = default_source_range();
  std::vector<StyleRange> targets = default_target_ranges();
  double min_mean_gap = 0.05;  // per-channel mean intensity gap required for each target
};

struct Bundle {
  std::uint64_t seed = 0;
  std::size_t height = 0, width = 0, num_classes = 0;
  DomainSpec source;
  std::vector<DomainSpec> targets;
  Split train;
  Split source_test;
  std::vector<Split> target_tests;

  // Source test first, then targets in order.
  std::vector<const Split*> test_splits() const {
    std::vector<const Split*> out{&source_test};
    for (const auto& t : target_tests) out.push_back(&t);
    return out;
  }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  return SeededRng::splitmix64(x);
}

inline Split make_split(const std::string& name, const DomainSpec& spec, std::uint64_t seed, std::uint64_t split_id,
                        std::size_t n, const BenchmarkOptions& opt) {
  Split s;
  s.name = name;
  s.domain = spec.id;
  s.data.images = Tensor<float>({n, 3, opt.height, opt.width});
  s.data.labels = LabelMap({n, opt.height, opt.width});
  const std::size_t px = opt.height * opt.width;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t scene = mix_seed(seed, split_id, i);
    auto sample = gen_scene(scene, opt.height, opt.width, opt.num_classes);
    SeededRng noise(mix_seed(scene, 0x51A7, split_id));
    auto styled = apply_style(sample.image, spec, noise);
    std::copy_n(styled.data(), 3 * px, s.data.images.data() + i * 3 * px);
    std::copy_n(sample.labels.data(), px, s.data.labels.data() + i * px);
    s.scene_seeds.push_back(scene);
  }
  return s;
}

inline std::array<double, 3> channel_means(const Dataset& d) {
  std::array<double, 3> m{};
  const std::size_t N = d.size(), HW = d.images.dim(2) * d.images.dim(3);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < HW; ++i) m[c] += d.images.plane(n, c)[i];
  for (auto& v : m) v /= static_cast<double>(N * HW);
  return m;
}

}  // namespace detail

inline double mean_intensity_gap(const Dataset& a, const Dataset& b) {
  const auto ma = detail::channel_means(a), mb = detail::channel_means(b);
  double g = 0.0;
  for (std::size_t c = 0; c < 3; ++c) g = std::max(g, std::abs(ma[c] - mb[c]));
  return g;
}

// Source train/test plus one test split per target. Scenes are drawn
// independently per split; a target spec that lands within min_mean_gap of
// the source in every channel mean is redrawn.
inline Bundle gen_benchmark(const BenchmarkOptions& opt) {
  if (opt.n_train == 0 || opt.n_test_per_domain == 0) throw std::invalid_argument("gen_benchmark: empty split");
  for (const auto& t : opt.targets) {
    if (!ranges_disjoint(opt.source, t)) {
      throw std::invalid_argument("gen_benchmark: style range '" + t.id + "' overlaps the source range");
    }
    if (t.id == opt.source.id) throw std::invalid_argument("gen_benchmark: duplicate domain id '" + t.id + "'");
  }
  Bundle b;
  b.seed = opt.seed;
  b.height = opt.height;
  b.width = opt.width;
  b.num_classes = opt.num_classes;
  SeededRng spec_rng = SeededRng(opt.seed).fork(0x5EC);
  b.source = sample_spec(opt.source, spec_rng);
  b.train = detail::make_split("train", b.source, opt.seed, 0, opt.n_train, opt);
  b.source_test = detail::make_split("test_source", b.source, opt.seed, 1, opt.n_test_per_domain, opt);
  for (std::size_t t = 0; t < opt.targets.size(); ++t) {
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
      DomainSpec spec = sample_spec(opt.targets[t], spec_rng);
      Split split = detail::make_split("test_" + spec.id, spec, opt.seed, 2 + t, opt.n_test_per_domain, opt);
      if (mean_intensity_gap(split.data, b.source_test.data) > opt.min_mean_gap) {
        b.targets.push_back(spec);
        b.target_tests.push_back(std::move(split));
        ok = true;
      }
    }
    if (!ok) {
      throw std::runtime_error("gen_benchmark: target '" + opt.targets[t].id +
                               "' never separated from the source by the minimum mean gap");
    }
  }
  return b;
}

// ---- bundle on disk: manifest.json + img_<split>_<i>.sawt / lbl_<split>_<i>.sawt

inline constexpr int kManifestVersion = 1;

inline nlohmann::json spec_to_json(const DomainSpec& s) {
  return {{"id", s.id},
          {"channel_gain", s.channel_gain},
          {"channel_bias", s.channel_bias},
          {"gamma", s.gamma},
          {"noise_std", s.noise_std}};
}

inline DomainSpec spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.id = j.at("id").get<std::string>();
  s.channel_gain = j.at("channel_gain").get<std::array<double, 3>>();
  s.channel_bias = j.at("channel_bias").get<std::array<double, 3>>();
  s.gamma = j.at("gamma").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.validate();
  return s;
}

inline void save_bundle(const std::filesystem::path& dir, const Bundle& b) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format_version"] = kManifestVersion;
  m["seed"] = b.seed;
  m["height"] = b.height;
  m["width"] = b.width;
  m["num_classes"] = b.num_classes;
  m["source"] = spec_to_json(b.source);
  m["targets"] = nlohmann::json::array();
  for (const auto& t : b.targets) m["targets"].push_back(spec_to_json(t));
  m["splits"] = nlohmann::json::array();
  std::vector<const Split*> splits{&b.train, &b.source_test};
  for (const auto& t : b.target_tests) splits.push_back(&t);
  const std::size_t px = b.height * b.width;
  for (const Split* s : splits) {
    m["splits"].push_back({{"name", s->name}, {"domain", s->domain}, {"count", s->data.size()},
                           {"scene_seeds", s->scene_seeds}});
    for (std::size_t i = 0; i < s->data.size(); ++i) {
      Tensor<float> img({3, b.height, b.width});
      std::copy_n(s->data.images.data() + i * 3 * px, 3 * px, img.data());
      Tensor<float> lbl({b.height, b.width});
      for (std::size_t p = 0; p < px; ++p) lbl[p] = static_cast<float>(s->data.labels[i * px + p]);
      const std::string idx = std::to_string(i);
      save_tensor(dir / ("img_" + s->name + "_" + idx + ".sawt"), img);
      save_tensor(dir / ("lbl_" + s->name + "_" + idx + ".sawt"), lbl);
    }
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << "\n";
}

inline Bundle load_bundle(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw std::runtime_error("dataset manifest not found: " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  if (m.value("format_version", 0) != kManifestVersion) {
    throw FormatError(mpath.string() + ": unsupported manifest version");
  }
  Bundle b;
  b.seed = m.at("seed").get<std::uint64_t>();
  b.height = m.at("height").get<std::size_t>();
  b.width = m.at("width").get<std::size_t>();
  b.num_classes = m.at("num_classes").get<std::size_t>();
  b.source = spec_from_json(m.at("source"));
  for (const auto& t : m.at("targets")) b.targets.push_back(spec_from_json(t));
  const std::size_t px = b.height * b.width;
  for (const auto& js : m.at("splits")) {
    Split s;
    s.name = js.at("name").get<std::string>();
    s.domain = js.at("domain").get<std::string>();
    s.scene_seeds = js.at("scene_seeds").get<std::vector<std::uint64_t>>();
    const auto n = js.at("count").get<std::size_t>();
    s.data.images = Tensor<float>({n, 3, b.height, b.width});
    s.data.labels = LabelMap({n, b.height, b.width});
    for (std::size_t i = 0; i < n; ++i) {
      const std::string idx = std::to_string(i);
      const auto ipath = dir / ("img_" + s.name + "_" + idx + ".sawt");
      const auto lpath = dir / ("lbl_" + s.name + "_" + idx + ".sawt");
      auto img = load_tensor(ipath);
      auto lbl = load_tensor(lpath);
      if (img.dims() != Shape{3, b.height, b.width}) throw FormatError(ipath.string() + ": unexpected shape");
      if (lbl.dims() != Shape{b.height, b.width}) throw FormatError(lpath.string() + ": unexpected shape");
      std::copy_n(img.data(), 3 * px, s.data.images.data() + i * 3 * px);
      for (std::size_t p = 0; p < px; ++p) {
        const float v = lbl[p];
        if (v != std::floor(v) || v < 0 || v >= static_cast<float>(b.num_classes)) {
          throw FormatError(lpath.string() + ": invalid label value " + std::to_string(v));
        }
        s.data.labels[i * px + p] = static_cast<std::int32_t>(v);
      }
    }
    if (s.name == "train") {
      b.train = std::move(s);
    } else if (s.name == "test_source") {
      b.source_test = std::move(s);
    } else {
      b.target_tests.push_back(std::move(s));
    }
  }
  if (b.train.data.size() == 0) throw FormatError(mpath.string() + ": no train split");
  return b;
}

}  // namespace semaware
