#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "marvis/image.hpp"

namespace marvis {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
  Eigen::VectorXd descriptor;  ///< 9x9 patch, mean-subtracted, unit L2 norm
};

struct KeypointConfig {
  int max_keypoints = 512;
  /// Fraction of the strongest Harris response a corner must exceed.
  double response_threshold = 0.01;
  double harris_k = 0.04;
};

/// Harris corners with 3x3 non-maximum suppression, parabolic sub-pixel
/// refinement, top `max_keypoints` by response. Throws SizeError below 16x16.
std::vector<Keypoint> detect_keypoints(const GrayImage& img, const KeypointConfig& cfg = {});

struct Match {
  int left = 0;
  int right = 0;
  bool operator==(const Match&) const = default;
};

/// Nearest/second-nearest descriptor ratio test plus mutual-best filtering.
/// Output is ordered by left index.
std::vector<Match> match_keypoints(const std::vector<Keypoint>& left,
                                   const std::vector<Keypoint>& right, double ratio = 0.7);

/// Rank-2, unit Frobenius norm fundamental matrix with x_right^T F x_left = 0.
class FundamentalMatrix {
 public:
  FundamentalMatrix() = default;
  /// Zeroes the smallest singular value and rescales to unit norm.
  explicit FundamentalMatrix(const Eigen::Matrix3d& raw);

  const Eigen::Matrix3d& matrix() const { return f_; }

 private:
  Eigen::Matrix3d f_ = Eigen::Matrix3d::Zero();
};

struct StereoCalibration {
  Eigen::Matrix3d k_left = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d k_right = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// JSON object with row-major arrays "K_left", "K_right", "R" (9 values) and "t" (3).
StereoCalibration read_calibration(const std::filesystem::path& path);
void write_calibration(const StereoCalibration& calib, const std::filesystem::path& path);

/// F = K_right^-T [t]x R K_left^-1. Throws DegeneracyError for a singular
/// intrinsic matrix or a zero baseline.
FundamentalMatrix fundamental_from_calibration(const Eigen::Matrix3d& k_left,
                                               const Eigen::Matrix3d& k_right,
                                               const Eigen::Matrix3d& rotation,
                                               const Eigen::Vector3d& translation);
FundamentalMatrix fundamental_from_calibration(const StereoCalibration& calib);

struct PointPair {
  Eigen::Vector2d left;
  Eigen::Vector2d right;
};

struct RansacConfig {
  int iterations = 2000;
  double inlier_threshold_px = 1.0;  ///< on the Sampson distance
  std::uint64_t seed = 0;
};

struct FundamentalEstimate {
  FundamentalMatrix f;
  std::vector<bool> inliers;
};

/// Hartley-normalized 8-point fit on exactly the given pairs (least squares
/// for more than 8). Throws InsufficientDataError / DegeneracyError.
FundamentalMatrix eight_point(const std::vector<PointPair>& pairs);

/// RANSAC around eight_point scored by Sampson distance, refit on all
/// inliers. Deterministic for a given seed.
FundamentalEstimate estimate_fundamental(const std::vector<PointPair>& pairs,
                                         const RansacConfig& cfg = {});

/// Sampson distance (pixels) of one pair.
double sampson_distance(const Eigen::Matrix3d& f, const Eigen::Vector2d& left,
                        const Eigen::Vector2d& right);

struct EpipolarDistance {
  double value = 0.0;
  bool degenerate = false;  ///< an epipolar line had a zero normal; value is 0
};

/// Symmetric point-to-epipolar-line distance in pixels, averaged over both images.
EpipolarDistance epipolar_error(const FundamentalMatrix& f, const Eigen::Vector2d& left,
                                const Eigen::Vector2d& right);
EpipolarDistance epipolar_error(const Eigen::Matrix3d& f, const Eigen::Vector2d& left,
                                const Eigen::Vector2d& right);

/// Sparse error map on the left image grid: each pair's error divided by the
/// largest error, written at the rounded left coordinate (collisions keep
/// the larger value), zeros elsewhere.
FloatMap build_error_map(const std::vector<PointPair>& pairs, const FundamentalMatrix& f,
                         int width, int height);

struct StereoMatchConfig {
  KeypointConfig keypoints;
  double ratio = 0.7;
};

/// Keypoints, matches and the resulting error map for one stereo pair.
struct StereoErrorAnalysis {
  std::vector<PointPair> pairs;
  std::vector<double> errors;             ///< raw symmetric distances, pixels
  std::vector<double> normalized_errors;  ///< errors / max error
  FloatMap map;
};

std::vector<PointPair> matched_pairs(const GrayImage& left, const GrayImage& right,
                                     const StereoMatchConfig& cfg = {});

StereoErrorAnalysis analyze_stereo(const GrayImage& left, const GrayImage& right,
                                   const FundamentalMatrix& f, const StereoMatchConfig& cfg = {});

}  // namespace marvis
