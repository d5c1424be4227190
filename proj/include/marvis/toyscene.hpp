#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "marvis/epipolar.hpp"
#include "marvis/image.hpp"
#include "marvis/imageio.hpp"

namespace marvis {

struct SpriteSpec {
  std::string shape = "disc";  ///< "disc" or "box"
  double size = 6;             ///< radius or half side, px
  double x0 = 20, y0 = 20;     ///< center at frame 0
  double vx = 1, vy = 0;       ///< px/frame
  double wobble = 0.4;         ///< sinusoidal amplitude on top of the linear motion, px
  double wobble_period = 7;    ///< frames
  std::uint64_t texture_seed = 1;
};

struct RippleSpec {
  double amplitude = 1.5;    ///< px, horizontal and vertical components
  double wavelength = 18;    ///< px
  double phase_speed = 0.9;  ///< rad/frame
};

/// Procedural scene: textured background and sprites above the waterline,
/// a mirrored, jittered and rippled copy below it.
struct SceneConfig {
  int width = 96;
  int height = 96;
  int waterline_row = 48;
  std::vector<SpriteSpec> sprites = default_sprites();
  double jitter_sigma = 1.5;
  RippleSpec ripple;
  double stereo_baseline = 3;             ///< disparity of real content, px
  double stereo_phase = 1.5707963267948966;  ///< ripple phase difference between eyes, rad
  int frames = 4;
  double turbidity = 0.3;  ///< 0 = clear reflection, 1 = flat gray
  std::uint64_t seed = 0;

  static std::vector<SpriteSpec> default_sprites();
  /// Throws ConfigError, including when a sprite leaves the area above the
  /// waterline at any frame.
  void validate() const;
  /// A randomized variant (waterline, sprites, ripple, turbidity) for
  /// dataset generation; deterministic in `seed`.
  static SceneConfig randomized(const SceneConfig& base, std::uint64_t seed);
};

void to_json(nlohmann::json& j, const SpriteSpec& s);
void from_json(const nlohmann::json& j, SpriteSpec& s);
void to_json(nlohmann::json& j, const RippleSpec& r);
void from_json(const nlohmann::json& j, RippleSpec& r);
void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct SegmentationSample {
  GrayImage prev;
  GrayImage curr;
  std::optional<GrayImage> right;  ///< stereo partner of curr
  BinaryMask mask;                 ///< labels of curr
  std::optional<FlowField> flow;   ///< prev -> curr
  std::optional<StereoCalibration> calib;
  std::optional<FloatMap> lme;
};

/// All frames of one rendered sequence. flows[i] maps frame i to i+1.
struct SceneSequence {
  std::vector<GrayImage> left;
  std::vector<GrayImage> right;
  std::vector<BinaryMask> masks;
  std::vector<FlowField> flows;
  StereoCalibration calib;

  std::vector<SegmentationSample> samples() const;
};

SceneSequence render_sequence(const SceneConfig& cfg);
/// frames - 1 consecutive-pair samples.
std::vector<SegmentationSample> generate_sequence(const SceneConfig& cfg);

/// Writes seqNNNN/{left,right,mask}_TTT.pgm, flow_TTT.flo and calib.json per
/// sequence plus manifest.json. Whole sequences are assigned to splits by a
/// seeded shuffle so no split shares frames with another.
DatasetManifest export_dataset(const std::vector<SceneSequence>& sequences, const fs::path& out_dir,
                               std::uint64_t seed,
                               std::array<double, 3> split_fractions = {0.80, 0.05, 0.15});

enum class NoisePreset { kNone, kLow, kMedium, kHigh };

double preset_sigma(NoisePreset p);
NoisePreset parse_noise_preset(const std::string& s);

struct Vibration {
  double amplitude = 0;
  double frequency_hz = 0;
};

struct ImuModel {
  Eigen::Vector3d bias = Eigen::Vector3d::Zero();
  NoisePreset noise_preset = NoisePreset::kMedium;
  double random_walk_sigma = 0;
  std::optional<Vibration> vibration;
  double sample_rate_hz = 100;
};

/// M_GT + bias + white noise + random walk + vibration, per axis.
std::vector<Eigen::Vector3d> simulate_imu(const std::vector<Eigen::Vector3d>& ground_truth,
                                          const ImuModel& model, std::uint64_t seed);

}  // namespace marvis
