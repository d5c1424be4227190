#include "marvis/toyscene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "marvis/errors.hpp"

namespace marvis {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  return splitmix(splitmix(seed) ^ (stream * 0x632be59bd9b4e019ULL));
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(ix) * 0x9e3779b1ULL +
                                                   static_cast<std::uint64_t>(iy) * 0x85ebca77ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3 - 2 * t); }

double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double gx = x / cell, gy = y / cell;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  const double tx = smooth(gx - fx), ty = smooth(gy - fy);
  const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
  const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

float quantize(double v) {
  return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
}

Eigen::Vector2d sprite_center(const SpriteSpec& s, double t) {
  const double w = s.wobble_period > 0 ? kTwoPi / s.wobble_period : 0.0;
  return {s.x0 + s.vx * t + s.wobble * std::sin(w * t),
          s.y0 + s.vy * t + 0.5 * s.wobble * std::sin(w * t + 1.0)};
}

bool sprite_covers(const SpriteSpec& s, const Eigen::Vector2d& c, double x, double y) {
  const double dx = x - c.x(), dy = y - c.y();
  if (s.shape == "box") return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
  return dx * dx + dy * dy <= s.size * s.size;
}

/// The continuous above-water scene at one instant.
class Scene {
 public:
  Scene(const SceneConfig& cfg, int frame) : cfg_(cfg), bg_seed_(derive(cfg.seed, 1)) {
    for (const auto& s : cfg.sprites) centers_.push_back(sprite_center(s, frame));
  }

  /// Index of the topmost sprite covering (x, y), or -1.
  int sprite_at(double x, double y) const {
    for (int k = static_cast<int>(centers_.size()) - 1; k >= 0; --k)
      if (sprite_covers(cfg_.sprites[k], centers_[k], x, y)) return k;
    return -1;
  }

  double value(double x, double y) const {
    const int k = sprite_at(x, y);
    if (k >= 0) {
      const SpriteSpec& s = cfg_.sprites[k];
      const double lx = x - centers_[k].x(), ly = y - centers_[k].y();
      const std::uint64_t ts = derive(s.texture_seed, 7);
      const double base = (s.texture_seed % 2 == 0) ? 0.18 : 0.82;
      return base + 0.45 * (value_noise(ts, lx + 64, ly + 64, 2.5) - 0.5) +
             0.2 * (value_noise(ts + 1, lx + 64, ly + 64, 1.2) - 0.5);
    }
    return 0.5 + 0.75 * (0.5 * value_noise(bg_seed_, x, y, 9) + 0.3 * value_noise(bg_seed_ + 1, x, y, 4) +
                         0.2 * value_noise(bg_seed_ + 2, x, y, 2) - 0.5);
  }

 private:
  const SceneConfig& cfg_;
  std::uint64_t bg_seed_;
  std::vector<Eigen::Vector2d> centers_;
};

/// Water-surface displacement of the mirrored band for one eye and frame.
struct Surface {
  double jx = 0, jy = 0;
  double amplitude = 0, k = 0, phase_x = 0, phase_y = 0;

  double ox(double y) const { return jx + amplitude * std::sin(k * y + phase_x); }
  double oy(double x) const { return jy + amplitude * std::sin(k * x + phase_y); }
};

struct SceneDynamics {
  std::vector<Eigen::Vector2d> jitter;
  double phase_x = 0, phase_y = 0, phase_boundary = 0;

  SceneDynamics(const SceneConfig& cfg) {
    std::mt19937_64 rng(derive(cfg.seed, 2));
    std::uniform_real_distribution<double> angle(0.0, kTwoPi);
    phase_x = angle(rng);
    phase_y = angle(rng);
    phase_boundary = angle(rng);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int t = 0; t < cfg.frames; ++t) {
      const double a = gauss(rng), b = gauss(rng);
      jitter.emplace_back(cfg.jitter_sigma * a, cfg.jitter_sigma * b);
    }
  }

  Surface surface(const SceneConfig& cfg, int t, bool right_eye) const {
    Surface s;
    s.jx = jitter[t].x();
    s.jy = jitter[t].y();
    s.amplitude = cfg.ripple.amplitude;
    s.k = kTwoPi / cfg.ripple.wavelength;
    const double eye = right_eye ? cfg.stereo_phase : 0.0;
    s.phase_x = cfg.ripple.phase_speed * t + phase_x + eye;
    s.phase_y = cfg.ripple.phase_speed * t + phase_y + eye;
    return s;
  }

  double boundary(const SceneConfig& cfg, double x, int t) const {
    const double k = kTwoPi / (2.0 * cfg.ripple.wavelength);
    return cfg.waterline_row - 0.5 +
           0.5 * cfg.ripple.amplitude * std::sin(k * x + cfg.ripple.phase_speed * t + phase_boundary);
  }
};

double mirror_row(const SceneConfig& cfg, double y) { return 2.0 * cfg.waterline_row - 1.0 - y; }

}  // namespace

std::vector<SpriteSpec> SceneConfig::default_sprites() {
  std::vector<SpriteSpec> s(3);
  s[0] = {"disc", 6, 18, 16, 1.2, 0.1, 0.4, 7, 2};
  s[1] = {"box", 5, 70, 26, -0.9, 0.0, 0.3, 9, 3};
  s[2] = {"disc", 4, 46, 10, 0.6, 0.2, 0.3, 5, 5};
  return s;
}

void SceneConfig::validate() const {
  if (width < 16 || height < 16) throw ConfigError("scene must be at least 16x16");
  if (frames < 2) throw ConfigError("a sequence needs at least 2 frames");
  if (waterline_row < 1 || waterline_row >= height)
    throw ConfigError("waterline_row " + std::to_string(waterline_row) + " outside the image");
  if (!(jitter_sigma >= 0)) throw ConfigError("jitter_sigma must be >= 0");
  if (!(turbidity >= 0 && turbidity <= 1)) throw ConfigError("turbidity must lie in [0,1]");
  if (!(ripple.amplitude >= 0) || !(ripple.wavelength > 0))
    throw ConfigError("ripple needs amplitude >= 0 and wavelength > 0");
  const double ceiling = waterline_row - 1.0 - 0.5 * ripple.amplitude;
  for (std::size_t i = 0; i < sprites.size(); ++i) {
    const SpriteSpec& s = sprites[i];
    if (s.shape != "disc" && s.shape != "box")
      throw ConfigError("sprite " + std::to_string(i) + ": unknown shape '" + s.shape + "'");
    if (!(s.size > 0)) throw ConfigError("sprite " + std::to_string(i) + ": size must be positive");
    for (int t = 0; t < frames; ++t) {
      const Eigen::Vector2d c = sprite_center(s, t);
      if (c.x() - s.size < 0 || c.x() + s.size > width - 1 || c.y() - s.size < 0 ||
          c.y() + s.size > ceiling)
        throw ConfigError("sprite " + std::to_string(i) + " leaves the area above the waterline at frame " +
                          std::to_string(t));
    }
  }
}

SceneConfig SceneConfig::randomized(const SceneConfig& base, std::uint64_t seed) {
  std::mt19937_64 rng(derive(seed, 11));
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  SceneConfig c = base;
  c.seed = derive(seed, 12);
  c.waterline_row = static_cast<int>(std::lround(uni(0.38, 0.62) * base.height));
  c.turbidity = uni(0.15, 0.45);
  c.jitter_sigma = uni(1.0, 2.0);
  c.ripple.amplitude = uni(1.0, 2.0);
  c.ripple.wavelength = uni(14.0, 24.0);
  c.ripple.phase_speed = uni(0.6, 1.2);
  c.sprites.clear();
  const int count = 2 + static_cast<int>(rng() % 3);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      SpriteSpec s;
      s.shape = rng() % 2 ? "disc" : "box";
      s.size = uni(3.5, 7.0);
      s.vx = uni(-1.5, 1.5);
      s.vy = uni(-0.3, 0.3);
      s.wobble = uni(0.0, 0.6);
      s.wobble_period = uni(4.0, 10.0);
      s.texture_seed = rng() % 1000;
      s.x0 = uni(0, base.width);
      s.y0 = uni(0, c.waterline_row);
      SceneConfig trial = c;
      trial.sprites = {s};
      try {
        trial.validate();
      } catch (const ConfigError&) {
        continue;
      }
      c.sprites.push_back(s);
      break;
    }
  }
  return c;
}

SceneSequence render_sequence(const SceneConfig& cfg) {
  cfg.validate();
  const SceneDynamics dyn(cfg);
  const int w = cfg.width, h = cfg.height;
  const double contrast = 1.0 - cfg.turbidity;
  SceneSequence seq;

  for (int t = 0; t < cfg.frames; ++t) {
    const Scene scene(cfg, t);
    GrayImage left(w, h), right(w, h);
    BinaryMask mask(w, h);
    for (int eye = 0; eye < 2; ++eye) {
      const Surface surf = dyn.surface(cfg, t, eye == 1);
      const double shift = eye == 1 ? cfg.stereo_baseline : 0.0;
      GrayImage& img = eye == 0 ? left : right;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const bool virt = y >= dyn.boundary(cfg, x, t);
          double v;
          if (!virt) {
            v = scene.value(x + shift, y);
          } else {
            const double s = scene.value(x + shift + surf.ox(y), mirror_row(cfg, y) + surf.oy(x));
            v = 0.5 + contrast * (s - 0.5);
          }
          img(x, y) = quantize(v);
          if (eye == 0) mask(x, y) = virt ? 1 : 0;
        }
    }
    seq.left.push_back(std::move(left));
    seq.right.push_back(std::move(right));
    seq.masks.push_back(std::move(mask));
  }

  // Ground-truth flow on the grid of frame t-1.
  for (int t = 1; t < cfg.frames; ++t) {
    const Scene before(cfg, t - 1);
    std::vector<Eigen::Vector2d> step;
    for (const auto& s : cfg.sprites) step.push_back(sprite_center(s, t) - sprite_center(s, t - 1));
    const Surface s0 = dyn.surface(cfg, t - 1, false), s1 = dyn.surface(cfg, t, false);
    FlowField flow(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u = 0, v = 0;
        if (y < dyn.boundary(cfg, x, t - 1)) {
          const int k = before.sprite_at(x, y);
          if (k >= 0) {
            u = step[k].x();
            v = step[k].y();
          }
        } else {
          u = s0.ox(y) - s1.ox(y);
          v = s1.oy(x) - s0.oy(x);
          const int k = before.sprite_at(x + s0.ox(y), mirror_row(cfg, y) + s0.oy(x));
          if (k >= 0) {
            u += step[k].x();
            v -= step[k].y();
          }
        }
        flow.u(y, x) = static_cast<float>(u);
        flow.v(y, x) = static_cast<float>(v);
      }
    seq.flows.push_back(std::move(flow));
  }

  // Rectified pair: shared intrinsics, identity rotation, baseline along x.
  const double f = cfg.width;
  Eigen::Matrix3d k;
  k << f, 0, (cfg.width - 1) / 2.0, 0, f, (cfg.height - 1) / 2.0, 0, 0, 1;
  seq.calib.k_left = k;
  seq.calib.k_right = k;
  seq.calib.rotation.setIdentity();
  seq.calib.translation = Eigen::Vector3d(-(cfg.stereo_baseline > 0 ? cfg.stereo_baseline : 1.0) / f, 0, 0);
  return seq;
}

std::vector<SegmentationSample> SceneSequence::samples() const {
  std::vector<SegmentationSample> out;
  for (std::size_t t = 1; t < left.size(); ++t) {
    SegmentationSample s;
    s.prev = left[t - 1];
    s.curr = left[t];
    s.right = right[t];
    s.mask = masks[t];
    s.flow = flows[t - 1];
    s.calib = calib;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SegmentationSample> generate_sequence(const SceneConfig& cfg) {
  return render_sequence(cfg).samples();
}

DatasetManifest export_dataset(const std::vector<SceneSequence>& sequences, const fs::path& out_dir,
                               std::uint64_t seed, std::array<double, 3> split_fractions) {
  if (sequences.empty()) throw ConfigError("export_dataset: no sequences");
  const std::size_t n = sequences.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive(seed, 21));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
  const double total = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (!(total > 0)) throw ConfigError("split fractions must sum to a positive value");
  const auto n_train = std::min<std::size_t>(n, std::llround(split_fractions[0] / total * n));
  const auto n_val = std::min<std::size_t>(n - n_train, std::llround(split_fractions[1] / total * n));
  std::vector<Split> split(n, Split::kTest);
  for (std::size_t i = 0; i < n; ++i)
    split[order[i]] = i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);

  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  manifest.split_fractions = {split_fractions[0] / total, split_fractions[1] / total,
                              split_fractions[2] / total};
  char buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSequence& seq = sequences[i];
    std::snprintf(buf, sizeof buf, "seq%04zu", i);
    const std::string dir = buf;
    fs::create_directories(out_dir / dir);
    const auto name = [&](const char* kind, std::size_t t, const char* ext) {
      std::snprintf(buf, sizeof buf, "%s/%s_%03zu.%s", dir.c_str(), kind, t, ext);
      return std::string(buf);
    };
    for (std::size_t t = 0; t < seq.left.size(); ++t) {
      write_pgm(seq.left[t], out_dir / name("left", t, "pgm"));
      write_pgm(seq.right[t], out_dir / name("right", t, "pgm"));
      write_mask(seq.masks[t], out_dir / name("mask", t, "pgm"));
    }
    for (std::size_t t = 0; t < seq.flows.size(); ++t) write_flo(seq.flows[t], out_dir / name("flow", t, "flo"));
    write_calibration(seq.calib, out_dir / dir / "calib.json");
    for (std::size_t t = 1; t < seq.left.size(); ++t) {
      ManifestEntry e;
      e.frame_prev_path = name("left", t - 1, "pgm");
      e.frame_curr_path = name("left", t, "pgm");
      e.stereo_right_path = name("right", t, "pgm");
      e.mask_path = name("mask", t, "pgm");
      e.flow_path = name("flow", t - 1, "flo");
      e.calib_id = dir + "/calib";
      e.split = split[i];
      manifest.entries.push_back(std::move(e));
    }
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

double preset_sigma(NoisePreset p) {
  switch (p) {
    case NoisePreset::kNone: return 0.0;
    case NoisePreset::kLow: return 0.001;
    case NoisePreset::kMedium: return 0.01;
    case NoisePreset::kHigh: return 0.05;
  }
  return 0.0;
}

NoisePreset parse_noise_preset(const std::string& s) {
  if (s == "none") return NoisePreset::kNone;
  if (s == "low") return NoisePreset::kLow;
  if (s == "medium") return NoisePreset::kMedium;
  if (s == "high") return NoisePreset::kHigh;
  throw ConfigError("unknown noise preset '" + s + "' (none|low|medium|high)");
}

std::vector<Eigen::Vector3d> simulate_imu(const std::vector<Eigen::Vector3d>& ground_truth,
                                          const ImuModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sigma = preset_sigma(model.noise_preset);
  Eigen::Vector3d walk = Eigen::Vector3d::Zero();
  std::vector<Eigen::Vector3d> out;
  out.reserve(ground_truth.size());
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    Eigen::Vector3d white, step;
    for (int a = 0; a < 3; ++a) white[a] = gauss(rng);
    for (int a = 0; a < 3; ++a) step[a] = gauss(rng);
    walk += model.random_walk_sigma * step;
    Eigen::Vector3d m = ground_truth[i] + model.bias + sigma * white + walk;
    if (model.vibration) {
      const double phase = kTwoPi * model.vibration->frequency_hz * static_cast<double>(i) / model.sample_rate_hz;
      m.array() += model.vibration->amplitude * std::sin(phase);
    }
    out.push_back(m);
  }
  return out;
}

void to_json(nlohmann::json& j, const SpriteSpec& s) {
  j = nlohmann::json{{"shape", s.shape}, {"size", s.size},     {"x0", s.x0},
                     {"y0", s.y0},       {"vx", s.vx},         {"vy", s.vy},
                     {"wobble", s.wobble}, {"wobble_period", s.wobble_period},
                     {"texture_seed", s.texture_seed}};
}

void from_json(const nlohmann::json& j, SpriteSpec& s) {
  const SpriteSpec d;
  s.shape = j.value("shape", d.shape);
  s.size = j.value("size", d.size);
  s.x0 = j.value("x0", d.x0);
  s.y0 = j.value("y0", d.y0);
  s.vx = j.value("vx", d.vx);
  s.vy = j.value("vy", d.vy);
  s.wobble = j.value("wobble", d.wobble);
  s.wobble_period = j.value("wobble_period", d.wobble_period);
  s.texture_seed = j.value("texture_seed", d.texture_seed);
}

void to_json(nlohmann::json& j, const RippleSpec& r) {
  j = nlohmann::json{{"amplitude", r.amplitude}, {"wavelength", r.wavelength}, {"phase_speed", r.phase_speed}};
}

void from_json(const nlohmann::json& j, RippleSpec& r) {
  const RippleSpec d;
  r.amplitude = j.value("amplitude", d.amplitude);
  r.wavelength = j.value("wavelength", d.wavelength);
  r.phase_speed = j.value("phase_speed", d.phase_speed);
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"width", c.width},
                     {"height", c.height},
                     {"waterline_row", c.waterline_row},
                     {"sprites", c.sprites},
                     {"jitter_sigma", c.jitter_sigma},
                     {"ripple", c.ripple},
                     {"stereo_baseline", c.stereo_baseline},
                     {"stereo_phase", c.stereo_phase},
                     {"frames", c.frames},
                     {"turbidity", c.turbidity},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  const SceneConfig d;
  c.width = j.value("width", d.width);
  c.height = j.value("height", d.height);
  c.waterline_row = j.value("waterline_row", d.waterline_row);
  c.sprites = j.value("sprites", d.sprites);
  c.jitter_sigma = j.value("jitter_sigma", d.jitter_sigma);
  c.ripple = j.value("ripple", d.ripple);
  c.stereo_baseline = j.value("stereo_baseline", d.stereo_baseline);
  c.stereo_phase = j.value("stereo_phase", d.stereo_phase);
  c.frames = j.value("frames", d.frames);
  c.turbidity = j.value("turbidity", d.turbidity);
  c.seed = j.value("seed", d.seed);
}

}  // namespace marvis
