#pragma once

#include <utility>

#include "marvis/image.hpp"

namespace marvis {

/// Coarse-to-fine block matching.
struct FlowConfig {
  int block = 7;         ///< odd SAD block side
  int radius = 8;        ///< full search radius at the coarsest level
  int levels = 3;        ///< pyramid levels
  int refine_radius = 2; ///< search radius around the propagated estimate on finer levels
};

/// Dense flow on the grid of `prev` with SAD block matching. The coarsest
/// level searches +-radius exhaustively, finer levels search
/// +-refine_radius around the doubled coarse estimate, and the finest level
/// adds a parabolic sub-pixel fit (skipped where the block matches exactly).
/// Ties prefer the smaller displacement,
/// then smaller u, then smaller v. Pixels within `radius` of the border
/// copy the nearest interior estimate. Components are bounded by
/// radius * 2^(levels-1).
///
/// Throws ShapeError on mismatched frames and SizeError when the coarsest
/// level is smaller than block + 2 * radius.
FlowField estimate_flow(const GrayImage& prev, const GrayImage& curr, const FlowConfig& cfg = {});

/// Magnitude sqrt(u^2 + v^2) and angle atan2(v, u) in [0, 2*pi); the zero
/// vector has angle 0.
std::pair<FloatMap, FloatMap> flow_magnitude_angle(const FlowField& flow);

/// Angle of one vector in [0, 2*pi), 0 for the zero vector.
double flow_angle(double u, double v);

}  // namespace marvis
