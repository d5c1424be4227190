#include "marvis/bench.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>

#include "marvis/errors.hpp"
#include "marvis/flow.hpp"
#include "marvis/lme.hpp"
#include "marvis/model.hpp"
#include "marvis/ops.hpp"

namespace marvis {

const std::vector<std::string>& bench_kernel_names() {
  static const std::vector<std::string> names{"lme_brute", "lme_fast", "estimate_flow", "marvis_forward"};
  return names;
}

namespace {

GrayImage random_texture(int w, int h, std::mt19937_64& rng) {
  // Smoothed noise so block matching has structure to lock onto.
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  PlaneF raw(h, w);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = u(rng);
  GrayImage img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
          acc += raw(yy, xx);
          ++n;
        }
      img(x, y) = acc / n;
    }
  return img;
}

GrayImage shifted(const GrayImage& img, int sx, int sy) {
  GrayImage out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      out(x, y) = img(std::clamp(x - sx, 0, img.width() - 1), std::clamp(y - sy, 0, img.height() - 1));
  return out;
}

std::int64_t time_ns(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

BenchReport run_bench(const BenchConfig& cfg) {
  if (cfg.width < 32 || cfg.height < 32) throw ConfigError("bench dimensions must be at least 32x32");
  if (cfg.repeats < 1) throw ConfigError("bench repeats must be >= 1");
  for (const auto& k : cfg.kernels)
    if (std::find(bench_kernel_names().begin(), bench_kernel_names().end(), k) == bench_kernel_names().end())
      throw ConfigError("unknown bench kernel '" + k + "'");
  if (cfg.model != "tiny" && cfg.model != "default") throw ConfigError("bench model must be tiny or default");

  std::mt19937_64 rng(cfg.seed);
  const int w = cfg.width, h = cfg.height;
  FlowField flow(w, h);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      flow.u(y, x) = 2.0f * std::sin(0.05f * x) + 0.5f * g(rng);
      flow.v(y, x) = 2.0f * std::cos(0.07f * y) + 0.5f * g(rng);
    }
  const auto [m_norm, a_norm] = normalize_flow_channels(flow);
  const LmeConfig lme_cfg;
  const GrayImage prev = random_texture(w, h, rng);
  const GrayImage curr = shifted(prev, 2, 1);

  ModelConfig mcfg = cfg.model == "tiny" ? ModelConfig::tiny() : ModelConfig{};
  mcfg.seed = cfg.seed;
  const int ph = (h + 31) / 32 * 32, pw = (w + 31) / 32 * 32;

  std::map<std::string, std::function<void()>> kernels;
  kernels["lme_brute"] = [&] { (void)lme_brute(m_norm, a_norm, lme_cfg); };
  kernels["lme_fast"] = [&] { (void)lme_fast(m_norm, a_norm, lme_cfg); };
  kernels["estimate_flow"] = [&] { (void)estimate_flow(prev, curr, FlowConfig{}); };
  std::unique_ptr<MarvisModel<float>> model;
  Tensor<float> input;
  if (std::find(cfg.kernels.begin(), cfg.kernels.end(), "marvis_forward") != cfg.kernels.end()) {
    model = std::make_unique<MarvisModel<float>>(mcfg);
    model->set_training(false);
    input = Tensor<float>::full({1, 2, ph, pw}, 0.5f);
  }
  kernels["marvis_forward"] = [&] {
    NoGradGuard no_grad;
    (void)model->forward(input);
  };

  BenchReport report;
  report.config = cfg;
  report.low_confidence = cfg.repeats < 5;
  for (const auto& name : cfg.kernels) {
    auto& fn = kernels.at(name);
    fn();  // warmup
    KernelTiming t;
    for (int r = 0; r < cfg.repeats; ++r) t.runs_ns.push_back(time_ns(fn));
    std::vector<std::int64_t> sorted = t.runs_ns;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    t.median_ns = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2;
    t.frames_per_second = t.median_ns > 0 ? 1e9 / static_cast<double>(t.median_ns) : 0.0;
    report.kernels[name] = t;
  }
  if (report.kernels.count("lme_brute") && report.kernels.count("lme_fast"))
    report.speedups["lme_fast_vs_brute"] =
        static_cast<double>(report.kernels["lme_brute"].median_ns) /
        static_cast<double>(std::max<std::int64_t>(report.kernels["lme_fast"].median_ns, 1));
  return report;
}

nlohmann::json bench_to_json(const BenchReport& r) {
  nlohmann::json kernels = nlohmann::json::object();
  for (const auto& [name, t] : r.kernels)
    kernels[name] = {{"median_ns", t.median_ns}, {"runs_ns", t.runs_ns}, {"frames_per_second", t.frames_per_second}};
  return {{"width", r.config.width},
          {"height", r.config.height},
          {"config",
           {{"repeats", r.config.repeats},
            {"kernels", r.config.kernels},
            {"model", r.config.model},
            {"seed", r.config.seed},
            {"lme", {{"receptive_field", 7}, {"bins", 16}}}}},
          {"kernels", kernels},
          {"speedups", r.speedups},
          {"low_confidence", r.low_confidence}};
}

void validate_bench_json(const nlohmann::json& j) {
  const auto fail = [](const std::string& what) { throw ValidationError("bench report: " + what); };
  if (!j.is_object()) fail("not an object");
  for (const char* key : {"width", "height"})
    if (!j.contains(key) || !j[key].is_number_integer() || j[key].get<int>() < 1)
      fail(std::string("missing or invalid '") + key + "'");
  if (!j.contains("config") || !j["config"].is_object()) fail("missing 'config'");
  if (!j["config"].contains("repeats") || !j["config"]["repeats"].is_number_integer())
    fail("missing 'config.repeats'");
  const int repeats = j["config"]["repeats"].get<int>();
  if (!j.contains("low_confidence") || !j["low_confidence"].is_boolean()) fail("missing 'low_confidence'");
  if (j["low_confidence"].get<bool>() != (repeats < 5)) fail("'low_confidence' disagrees with repeats");
  if (!j.contains("kernels") || !j["kernels"].is_object()) fail("missing 'kernels'");
  for (const auto& [name, k] : j["kernels"].items()) {
    if (!k.contains("median_ns") || !k["median_ns"].is_number_integer()) fail(name + ": missing median_ns");
    if (!k.contains("runs_ns") || !k["runs_ns"].is_array() || static_cast<int>(k["runs_ns"].size()) != repeats)
      fail(name + ": runs_ns must hold one entry per repeat");
    if (!k.contains("frames_per_second") || !k["frames_per_second"].is_number()) fail(name + ": missing frames_per_second");
  }
  if (!j.contains("speedups") || !j["speedups"].is_object()) fail("missing 'speedups'");
  for (const auto& [name, s] : j["speedups"].items())
    if (!s.is_number() || !(s.get<double>() > 0)) fail("speedup " + name + " must be positive");
}

}  // namespace marvis
