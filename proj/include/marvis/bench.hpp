#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

namespace marvis {

struct BenchConfig {
  int width = 960;
  int height = 540;
  int repeats = 5;  ///< timed runs per kernel, after one warmup run
  std::vector<std::string> kernels{"lme_brute", "lme_fast", "estimate_flow", "marvis_forward"};
  std::string model = "tiny";  ///< "tiny" or "default"
  std::uint64_t seed = 0;
};

struct KernelTiming {
  std::int64_t median_ns = 0;
  std::vector<std::int64_t> runs_ns;
  double frames_per_second = 0;
};

struct BenchReport {
  BenchConfig config;
  std::map<std::string, KernelTiming> kernels;
  std::map<std::string, double> speedups;  ///< e.g. "lme_fast_vs_brute" = brute / fast
  bool low_confidence = false;             ///< fewer than 5 timed runs
};

const std::vector<std::string>& bench_kernel_names();

/// Times the selected kernels on seeded synthetic inputs. Unknown kernels
/// or invalid sizes throw ConfigError.
BenchReport run_bench(const BenchConfig& cfg);

nlohmann::json bench_to_json(const BenchReport& r);
/// Checks required keys, types and internal consistency; throws
/// ValidationError naming the first problem.
void validate_bench_json(const nlohmann::json& j);

}  // namespace marvis
