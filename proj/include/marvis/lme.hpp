#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include "marvis/flow.hpp"
#include "marvis/image.hpp"

namespace marvis {

/// Local Motion Entropy parameters.
struct LmeConfig {
  int receptive_field = 7;  ///< odd window side k >= 3
  int bins = 16;            ///< histogram bins per channel, 2..256
  double alpha = 0.5;       ///< magnitude weight
  double beta = 0.5;        ///< angle weight
  bool normalize_output = true;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  /// Upper bound of the raw entropy, (alpha + beta) * log2(bins).
  double max_entropy() const;
};

/// Per-pixel LME values (double precision) plus the config that made them.
struct EntropyMap {
  Plane<double> values;
  LmeConfig config;

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
  FloatMap to_floatmap() const;
};

/// m_norm = |flow| / max(max |flow|, 1e-12), clamped to [0,1];
/// a_norm = angle / (2*pi) in [0,1).
std::pair<FloatMap, FloatMap> normalize_flow_channels(const FlowField& flow);

/// Histogram bin of a normalized value: half-open bins [i/B, (i+1)/B), the
/// last bin closed so 1.0 lands in bin B-1.
inline int lme_bin(float value, int bins) {
  const double scaled = static_cast<double>(value) * bins;
  if (!(scaled > 0.0)) return 0;
  const int b = static_cast<int>(scaled);
  return b >= bins ? bins - 1 : b;
}

/// Reference implementation: every window histogram is rebuilt from
/// scratch. Replicate padding keeps the output the size of the input.
EntropyMap lme_brute(const FloatMap& m_norm, const FloatMap& a_norm, const LmeConfig& cfg);

/// Sliding-window implementation with incremental integer histograms.
/// Bit-identical to lme_brute on every input.
EntropyMap lme_fast(const FloatMap& m_norm, const FloatMap& a_norm, const LmeConfig& cfg);

/// normalize_flow_channels followed by lme_fast.
EntropyMap lme_from_flow(const FlowField& flow, const LmeConfig& cfg);

/// Flow from `flow_file` when given (dims must match the frames), otherwise
/// estimated with `flow_cfg`; then lme_from_flow.
EntropyMap lme_from_frames(const GrayImage& prev, const GrayImage& curr, const LmeConfig& cfg,
                           const std::optional<std::filesystem::path>& flow_file = std::nullopt,
                           const FlowConfig& flow_cfg = {});

}  // namespace marvis
