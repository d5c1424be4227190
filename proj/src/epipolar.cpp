#include "marvis/epipolar.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <random>

#include "marvis/errors.hpp"

namespace marvis {

namespace {

constexpr int kPatchRadius = 4;  // 9x9 descriptor
constexpr int kBorder = kPatchRadius + 1;

Plane<double> harris_response(const GrayImage& img, double k) {
  const int w = img.width(), h = img.height();
  auto at = [&](int x, int y) {
    return static_cast<double>(img.pixels(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)));
  };
  Plane<double> ixx(h, w), iyy(h, w), ixy(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
      const double gy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
      ixx(y, x) = gx * gx;
      iyy(y, x) = gy * gy;
      ixy(y, x) = gx * gy;
    }
  }
  // Separable binomial 5-tap smoothing.
  const double taps[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  auto smooth = [&](const Plane<double>& src) {
    Plane<double> tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int t = -2; t <= 2; ++t) s += taps[t + 2] * src(y, std::clamp(x + t, 0, w - 1));
        tmp(y, x) = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int t = -2; t <= 2; ++t) s += taps[t + 2] * tmp(std::clamp(y + t, 0, h - 1), x);
        out(y, x) = s;
      }
    return out;
  };
  const Plane<double> sxx = smooth(ixx), syy = smooth(iyy), sxy = smooth(ixy);
  const Plane<double> trace = sxx + syy;
  return sxx * syy - sxy * sxy - k * trace * trace;
}

double peak_offset(double m, double c, double p) {
  const double denom = m - 2.0 * c + p;
  if (!(denom < 0.0)) return 0.0;
  return std::clamp(0.5 * (m - p) / denom, -0.5, 0.5);
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const GrayImage& img, const KeypointConfig& cfg) {
  if (img.width() < 16 || img.height() < 16)
    throw SizeError("detect_keypoints needs at least 16x16 pixels");
  const int w = img.width(), h = img.height();
  const Plane<double> resp = harris_response(img, cfg.harris_k);
  const double peak = resp.maxCoeff();
  if (!(peak > 1e-12)) return {};
  const double threshold = std::max(cfg.response_threshold * peak, 1e-12);

  std::vector<Keypoint> kps;
  for (int y = kBorder; y < h - kBorder; ++y) {
    for (int x = kBorder; x < w - kBorder; ++x) {
      const double r = resp(y, x);
      if (r <= threshold) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const double n = resp(y + dy, x + dx);
          // Plateaus keep their first pixel in raster order.
          const bool earlier = dy < 0 || (dy == 0 && dx < 0);
          if (n > r || (earlier && n == r)) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;

      Eigen::VectorXd desc((2 * kPatchRadius + 1) * (2 * kPatchRadius + 1));
      int i = 0;
      for (int dy = -kPatchRadius; dy <= kPatchRadius; ++dy)
        for (int dx = -kPatchRadius; dx <= kPatchRadius; ++dx)
          desc[i++] = img.pixels(y + dy, x + dx);
      desc.array() -= desc.mean();
      const double norm = desc.norm();
      if (norm < 1e-9) continue;

      Keypoint kp;
      kp.x = x + peak_offset(resp(y, x - 1), r, resp(y, x + 1));
      kp.y = y + peak_offset(resp(y - 1, x), r, resp(y + 1, x));
      kp.score = r;
      kp.descriptor = desc / norm;
      kps.push_back(std::move(kp));
    }
  }
  std::stable_sort(kps.begin(), kps.end(),
                   [](const Keypoint& a, const Keypoint& b) { return a.score > b.score; });
  if (static_cast<int>(kps.size()) > cfg.max_keypoints) kps.resize(std::max(cfg.max_keypoints, 0));
  return kps;
}

std::vector<Match> match_keypoints(const std::vector<Keypoint>& left,
                                   const std::vector<Keypoint>& right, double ratio) {
  if (left.empty() || right.empty()) return {};
  const std::size_t n = left.size(), m = right.size();
  Eigen::MatrixXd dist(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (left[i].descriptor.size() != right[j].descriptor.size())
        throw ShapeError("descriptor lengths differ");
      dist(i, j) = (left[i].descriptor - right[j].descriptor).norm();
    }

  std::vector<Match> out;
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    const double d1 = dist.row(i).minCoeff(&best);
    double d2 = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (static_cast<Eigen::Index>(j) != best) d2 = std::min(d2, dist(i, j));
    if (!(d1 < ratio * d2)) continue;
    Eigen::Index back = 0;
    dist.col(best).minCoeff(&back);
    if (back != static_cast<Eigen::Index>(i)) continue;
    out.push_back({static_cast<int>(i), static_cast<int>(best)});
  }
  return out;
}

FundamentalMatrix::FundamentalMatrix(const Eigen::Matrix3d& raw) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = svd.singularValues();
  s[2] = 0.0;
  Eigen::Matrix3d f = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  const double norm = f.norm();
  if (!(norm > 0.0)) throw DegeneracyError("fundamental matrix is zero");
  f_ = f / norm;
}

namespace {

Eigen::Matrix3d cross_matrix(const Eigen::Vector3d& t) {
  Eigen::Matrix3d m;
  m << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  return m;
}

Eigen::Matrix3d inverse_intrinsics(const Eigen::Matrix3d& k, const char* which) {
  const double det = k.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-12)
    throw DegeneracyError(std::string(which) + " intrinsic matrix is singular");
  return k.inverse();
}

}  // namespace

FundamentalMatrix fundamental_from_calibration(const Eigen::Matrix3d& k_left,
                                               const Eigen::Matrix3d& k_right,
                                               const Eigen::Matrix3d& rotation,
                                               const Eigen::Vector3d& translation) {
  if (!(translation.norm() > 0.0)) throw DegeneracyError("zero stereo baseline");
  const Eigen::Matrix3d kl_inv = inverse_intrinsics(k_left, "left");
  const Eigen::Matrix3d kr_inv = inverse_intrinsics(k_right, "right");
  return FundamentalMatrix(kr_inv.transpose() * cross_matrix(translation) * rotation * kl_inv);
}

FundamentalMatrix fundamental_from_calibration(const StereoCalibration& c) {
  return fundamental_from_calibration(c.k_left, c.k_right, c.rotation, c.translation);
}

namespace {

Eigen::Matrix3d matrix_from_json(const nlohmann::json& j, const char* key) {
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 9) throw FormatError(std::string(key) + " must hold 9 values");
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = v[3 * r + c];
  return m;
}

std::vector<double> matrix_to_vec(const Eigen::Matrix3d& m) {
  std::vector<double> v;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v.push_back(m(r, c));
  return v;
}

}  // namespace

StereoCalibration read_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    StereoCalibration c;
    c.k_left = matrix_from_json(j, "K_left");
    c.k_right = matrix_from_json(j, "K_right");
    c.rotation = matrix_from_json(j, "R");
    const auto t = j.at("t").get<std::vector<double>>();
    if (t.size() != 3) throw FormatError("t must hold 3 values");
    c.translation = Eigen::Vector3d(t[0], t[1], t[2]);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_calibration(const StereoCalibration& c, const std::filesystem::path& path) {
  nlohmann::json j;
  j["K_left"] = matrix_to_vec(c.k_left);
  j["K_right"] = matrix_to_vec(c.k_right);
  j["R"] = matrix_to_vec(c.rotation);
  j["t"] = std::vector<double>{c.translation.x(), c.translation.y(), c.translation.z()};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

namespace {

// Similarity moving the centroid to the origin with mean distance sqrt(2).
Eigen::Matrix3d hartley_transform(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double mean = 0.0;
  for (const auto& p : pts) mean += (p - c).norm();
  mean /= static_cast<double>(pts.size());
  if (!(mean > 1e-12)) throw DegeneracyError("all points coincide");
  const double s = std::sqrt(2.0) / mean;
  Eigen::Matrix3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

// Smallest eigenvalue of the 2x2 scatter relative to the largest; zero for collinear sets.
double spread_ratio(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& p : pts) cov += (p - c) * (p - c).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
  const double hi = es.eigenvalues()[1];
  return hi > 0.0 ? es.eigenvalues()[0] / hi : 0.0;
}

}  // namespace

FundamentalMatrix eight_point(const std::vector<PointPair>& pairs) {
  if (pairs.size() < 8) throw InsufficientDataError("eight_point needs at least 8 pairs");
  std::vector<Eigen::Vector2d> l, r;
  for (const auto& p : pairs) {
    l.push_back(p.left);
    r.push_back(p.right);
  }
  if (spread_ratio(l) < 1e-12 || spread_ratio(r) < 1e-12) throw DegeneracyError("points are collinear");
  const Eigen::Matrix3d tl = hartley_transform(l);
  const Eigen::Matrix3d tr = hartley_transform(r);

  Eigen::MatrixXd a(static_cast<Eigen::Index>(pairs.size()), 9);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Eigen::Vector3d x = tl * l[i].homogeneous();
    const Eigen::Vector3d xp = tr * r[i].homogeneous();
    a.row(static_cast<Eigen::Index>(i)) << xp.x() * x.x(), xp.x() * x.y(), xp.x(), xp.y() * x.x(),
        xp.y() * x.y(), xp.y(), x.x(), x.y(), 1.0;
  }
  Eigen::Matrix<double, 9, 1> f;
  if (a.rows() < 9) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    f = svd.matrixV().col(8);
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> es(a.transpose() * a);
    f = es.eigenvectors().col(0);
  }
  Eigen::Matrix3d fn;
  fn << f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8];
  const FundamentalMatrix rank2(fn);
  return FundamentalMatrix(tr.transpose() * rank2.matrix() * tl);
}

double sampson_distance(const Eigen::Matrix3d& f, const Eigen::Vector2d& left,
                        const Eigen::Vector2d& right) {
  const Eigen::Vector3d x = left.homogeneous();
  const Eigen::Vector3d xp = right.homogeneous();
  const Eigen::Vector3d fx = f * x;
  const Eigen::Vector3d ftxp = f.transpose() * xp;
  const double num = xp.dot(fx);
  const double den = fx.x() * fx.x() + fx.y() * fx.y() + ftxp.x() * ftxp.x() + ftxp.y() * ftxp.y();
  if (!(den > 0.0)) return std::numeric_limits<double>::infinity();
  return std::abs(num) / std::sqrt(den);
}

FundamentalEstimate estimate_fundamental(const std::vector<PointPair>& pairs,
                                         const RansacConfig& cfg) {
  const std::size_t n = pairs.size();
  if (n < 8) throw InsufficientDataError("estimate_fundamental needs at least 8 matches, got " +
                                         std::to_string(n));
  {
    std::vector<Eigen::Vector2d> l, r;
    for (const auto& p : pairs) {
      l.push_back(p.left);
      r.push_back(p.right);
    }
    if (spread_ratio(l) < 1e-12 || spread_ratio(r) < 1e-12)
      throw DegeneracyError("matched points are collinear");
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::size_t best_count = 0;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<bool> best_mask(n, false);
  std::vector<PointPair> sample(8);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t s = 0; s < 8; ++s) {
      std::uniform_int_distribution<std::size_t> pick(s, n - 1);
      std::swap(order[s], order[pick(rng)]);
      sample[s] = pairs[order[s]];
    }
    FundamentalMatrix f;
    try {
      f = eight_point(sample);
    } catch (const DegeneracyError&) {
      continue;
    }
    std::size_t count = 0;
    double cost = 0.0;
    std::vector<bool> mask(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = sampson_distance(f.matrix(), pairs[i].left, pairs[i].right);
      if (d < cfg.inlier_threshold_px) {
        mask[i] = true;
        ++count;
        cost += d;
      }
    }
    if (count > best_count || (count == best_count && cost < best_cost)) {
      best_count = count;
      best_cost = cost;
      best_mask = std::move(mask);
    }
  }
  if (best_count < 8) throw DegeneracyError("RANSAC found fewer than 8 inliers");

  std::vector<PointPair> inliers;
  for (std::size_t i = 0; i < n; ++i)
    if (best_mask[i]) inliers.push_back(pairs[i]);
  FundamentalEstimate est{eight_point(inliers), std::vector<bool>(n, false)};
  for (std::size_t i = 0; i < n; ++i)
    est.inliers[i] =
        sampson_distance(est.f.matrix(), pairs[i].left, pairs[i].right) < cfg.inlier_threshold_px;
  return est;
}

EpipolarDistance epipolar_error(const Eigen::Matrix3d& f_raw, const Eigen::Vector2d& left,
                                const Eigen::Vector2d& right) {
  const double scale = f_raw.norm();
  if (!(scale > 0.0)) return {0.0, true};
  const Eigen::Matrix3d f = f_raw / scale;
  const Eigen::Vector3d x = left.homogeneous();
  const Eigen::Vector3d xp = right.homogeneous();
  const Eigen::Vector3d line_right = f * x;
  const Eigen::Vector3d line_left = f.transpose() * xp;
  const double nr = std::hypot(line_right.x(), line_right.y());
  const double nl = std::hypot(line_left.x(), line_left.y());
  constexpr double kTiny = 1e-15;
  if (nr < kTiny || nl < kTiny) return {0.0, true};
  const double dr = std::abs(xp.dot(line_right)) / nr;
  const double dl = std::abs(x.dot(line_left)) / nl;
  return {0.5 * (dr + dl), false};
}

EpipolarDistance epipolar_error(const FundamentalMatrix& f, const Eigen::Vector2d& left,
                                const Eigen::Vector2d& right) {
  return epipolar_error(f.matrix(), left, right);
}

namespace {

std::vector<double> pair_errors(const std::vector<PointPair>& pairs, const FundamentalMatrix& f) {
  std::vector<double> e;
  e.reserve(pairs.size());
  for (const auto& p : pairs) e.push_back(epipolar_error(f, p.left, p.right).value);
  return e;
}

FloatMap scatter_errors(const std::vector<PointPair>& pairs, const std::vector<double>& normalized,
                        int width, int height) {
  FloatMap map(width, height);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const long x = std::lround(pairs[i].left.x());
    const long y = std::lround(pairs[i].left.y());
    if (x < 0 || y < 0 || x >= width || y >= height)
      throw ValidationError("match coordinate outside the target image");
    float& cell = map.values(y, x);
    cell = std::max(cell, static_cast<float>(normalized[i]));
  }
  return map;
}

std::vector<double> normalize_by_max(const std::vector<double>& errors) {
  double peak = 0.0;
  for (double e : errors) peak = std::max(peak, e);
  const double denom = std::max(peak, 1e-12);
  std::vector<double> out;
  out.reserve(errors.size());
  for (double e : errors) out.push_back(e / denom);
  return out;
}

}  // namespace

FloatMap build_error_map(const std::vector<PointPair>& pairs, const FundamentalMatrix& f, int width,
                         int height) {
  return scatter_errors(pairs, normalize_by_max(pair_errors(pairs, f)), width, height);
}

std::vector<PointPair> matched_pairs(const GrayImage& left, const GrayImage& right,
                                     const StereoMatchConfig& cfg) {
  const auto kl = detect_keypoints(left, cfg.keypoints);
  const auto kr = detect_keypoints(right, cfg.keypoints);
  std::vector<PointPair> pairs;
  for (const auto& m : match_keypoints(kl, kr, cfg.ratio))
    pairs.push_back({{kl[m.left].x, kl[m.left].y}, {kr[m.right].x, kr[m.right].y}});
  return pairs;
}

StereoErrorAnalysis analyze_stereo(const GrayImage& left, const GrayImage& right,
                                   const FundamentalMatrix& f, const StereoMatchConfig& cfg) {
  StereoErrorAnalysis out;
  out.pairs = matched_pairs(left, right, cfg);
  out.errors = pair_errors(out.pairs, f);
  out.normalized_errors = normalize_by_max(out.errors);
  out.map = scatter_errors(out.pairs, out.normalized_errors, left.width(), left.height());
  return out;
}

}  // namespace marvis
