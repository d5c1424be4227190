#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace marvis {

/// Row-major 2D plane: rows index y, columns index x.
template <typename T>
using Plane = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using PlaneF = Plane<float>;
using PlaneU8 = Plane<std::uint8_t>;

/// Luminance image with values in [0,1].
struct GrayImage {
  PlaneF pixels;

  GrayImage() = default;
  GrayImage(int width, int height) : pixels(PlaneF::Zero(height, width)) {}
  explicit GrayImage(PlaneF p) : pixels(std::move(p)) {}

  int width() const { return static_cast<int>(pixels.cols()); }
  int height() const { return static_cast<int>(pixels.rows()); }
  float operator()(int x, int y) const { return pixels(y, x); }
  float& operator()(int x, int y) { return pixels(y, x); }
};

/// Segmentation labels: 1 = virtual region, 0 = real region.
struct BinaryMask {
  PlaneU8 labels;

  BinaryMask() = default;
  BinaryMask(int width, int height) : labels(PlaneU8::Zero(height, width)) {}
  explicit BinaryMask(PlaneU8 l) : labels(std::move(l)) {}

  int width() const { return static_cast<int>(labels.cols()); }
  int height() const { return static_cast<int>(labels.rows()); }
  std::uint8_t operator()(int x, int y) const { return labels(y, x); }
  std::uint8_t& operator()(int x, int y) { return labels(y, x); }
};

/// Dense float map; carrier for entropy maps, epipolar error maps and
/// probability maps.
struct FloatMap {
  PlaneF values;

  FloatMap() = default;
  FloatMap(int width, int height) : values(PlaneF::Zero(height, width)) {}
  explicit FloatMap(PlaneF v) : values(std::move(v)) {}

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
  float operator()(int x, int y) const { return values(y, x); }
  float& operator()(int x, int y) { return values(y, x); }
};

/// Per-pixel motion (u, v) in pixels/frame, defined on the grid of the
/// earlier frame: prev(x, y) ~ curr(x + u, y + v).
struct FlowField {
  PlaneF u;
  PlaneF v;

  FlowField() = default;
  FlowField(int width, int height)
      : u(PlaneF::Zero(height, width)), v(PlaneF::Zero(height, width)) {}

  int width() const { return static_cast<int>(u.cols()); }
  int height() const { return static_cast<int>(u.rows()); }
};

}  // namespace marvis
