#include "marvis/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "marvis/errors.hpp"

namespace marvis {

namespace {

PlaneF downsample2(const PlaneF& src) {
  const Eigen::Index h = src.rows() / 2;
  const Eigen::Index w = src.cols() / 2;
  PlaneF out(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      out(y, x) = 0.25f * (src(2 * y, 2 * x) + src(2 * y, 2 * x + 1) + src(2 * y + 1, 2 * x) +
                           src(2 * y + 1, 2 * x + 1));
  return out;
}

class BlockMatcher {
 public:
  BlockMatcher(const PlaneF& prev, const PlaneF& curr, int block)
      : prev_(prev), curr_(curr), half_(block / 2),
        w_(static_cast<int>(prev.cols())), h_(static_cast<int>(prev.rows())) {}

  float sad(int x, int y, int dx, int dy) const {
    const int x0 = x - half_, x1 = x + half_, y0 = y - half_, y1 = y + half_;
    float acc = 0.0f;
    if (x0 >= 0 && y0 >= 0 && x1 < w_ && y1 < h_ && x0 + dx >= 0 && y0 + dy >= 0 &&
        x1 + dx < w_ && y1 + dy < h_) {
      for (int yy = y0; yy <= y1; ++yy) {
        const float* p = &prev_(yy, x0);
        const float* c = &curr_(yy + dy, x0 + dx);
        for (int k = 0; k <= 2 * half_; ++k) acc += std::abs(p[k] - c[k]);
      }
      return acc;
    }
    for (int yy = y0; yy <= y1; ++yy) {
      const int py = std::clamp(yy, 0, h_ - 1);
      const int cy = std::clamp(yy + dy, 0, h_ - 1);
      for (int xx = x0; xx <= x1; ++xx) {
        const int px = std::clamp(xx, 0, w_ - 1);
        const int cx = std::clamp(xx + dx, 0, w_ - 1);
        acc += std::abs(prev_(py, px) - curr_(cy, cx));
      }
    }
    return acc;
  }

 private:
  const PlaneF& prev_;
  const PlaneF& curr_;
  int half_;
  int w_;
  int h_;
};

struct Candidate {
  float cost;
  int dx;
  int dy;
};

// Lower cost wins; ties go to the smaller displacement, then smaller u, then smaller v.
bool better(const Candidate& a, const Candidate& b) {
  if (a.cost != b.cost) return a.cost < b.cost;
  const int ma = a.dx * a.dx + a.dy * a.dy;
  const int mb = b.dx * b.dx + b.dy * b.dy;
  if (ma != mb) return ma < mb;
  if (a.dx != b.dx) return a.dx < b.dx;
  return a.dy < b.dy;
}

float parabolic_offset(float cm, float c0, float cp) {
  const float denom = cm - 2.0f * c0 + cp;
  if (!(denom > 0.0f)) return 0.0f;
  return std::clamp(0.5f * (cm - cp) / denom, -0.5f, 0.5f);
}

}  // namespace

FlowField estimate_flow(const GrayImage& prev, const GrayImage& curr, const FlowConfig& cfg) {
  if (prev.width() != curr.width() || prev.height() != curr.height())
    throw ShapeError("estimate_flow: frame dimensions differ");
  if (cfg.block < 1 || cfg.block % 2 == 0) throw ConfigError("flow block must be odd and >= 1");
  if (cfg.radius < 1 || cfg.levels < 1 || cfg.refine_radius < 1)
    throw ConfigError("flow radius, refine_radius and levels must be >= 1");

  const int min_side = cfg.block + 2 * cfg.radius;
  const int scale = 1 << (cfg.levels - 1);
  if (prev.width() / scale < min_side || prev.height() / scale < min_side)
    throw SizeError("estimate_flow: coarsest level " + std::to_string(prev.width() / scale) +
                    "x" + std::to_string(prev.height() / scale) + " is smaller than " +
                    std::to_string(min_side) + "x" + std::to_string(min_side));

  std::vector<PlaneF> prev_pyr{prev.pixels};
  std::vector<PlaneF> curr_pyr{curr.pixels};
  for (int l = 1; l < cfg.levels; ++l) {
    prev_pyr.push_back(downsample2(prev_pyr.back()));
    curr_pyr.push_back(downsample2(curr_pyr.back()));
  }

  Plane<int> du, dv;
  for (int l = cfg.levels - 1; l >= 0; --l) {
    const PlaneF& p = prev_pyr[l];
    const int w = static_cast<int>(p.cols());
    const int h = static_cast<int>(p.rows());
    const int bound = cfg.radius << (cfg.levels - 1 - l);
    const bool coarsest = l == cfg.levels - 1;
    const int search = coarsest ? cfg.radius : cfg.refine_radius;
    BlockMatcher matcher(p, curr_pyr[l], cfg.block);

    Plane<int> nu(h, w), nv(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int cx = 0, cy = 0;
        if (!coarsest) {
          const int sx = std::min(x / 2, static_cast<int>(du.cols()) - 1);
          const int sy = std::min(y / 2, static_cast<int>(du.rows()) - 1);
          cx = 2 * du(sy, sx);
          cy = 2 * dv(sy, sx);
        }
        Candidate best{0.0f, 0, 0};
        bool have = false;
        for (int oy = -search; oy <= search; ++oy) {
          const int dy = cy + oy;
          if (dy < -bound || dy > bound) continue;
          for (int ox = -search; ox <= search; ++ox) {
            const int dx = cx + ox;
            if (dx < -bound || dx > bound) continue;
            const Candidate c{matcher.sad(x, y, dx, dy), dx, dy};
            if (!have || better(c, best)) {
              best = c;
              have = true;
            }
          }
        }
        nu(y, x) = best.dx;
        nv(y, x) = best.dy;
      }
    }
    du = std::move(nu);
    dv = std::move(nv);
  }

  const int w = prev.width();
  const int h = prev.height();
  const float limit = static_cast<float>(cfg.radius * scale);
  FlowField flow(w, h);
  BlockMatcher matcher(prev.pixels, curr.pixels, cfg.block);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int dx = du(y, x);
      const int dy = dv(y, x);
      const float c0 = matcher.sad(x, y, dx, dy);
      if (c0 == 0.0f) {
        // An exact block match needs no refinement.
        flow.u(y, x) = static_cast<float>(dx);
        flow.v(y, x) = static_cast<float>(dy);
        continue;
      }
      const float ox = parabolic_offset(matcher.sad(x, y, dx - 1, dy), c0,
                                        matcher.sad(x, y, dx + 1, dy));
      const float oy = parabolic_offset(matcher.sad(x, y, dx, dy - 1), c0,
                                        matcher.sad(x, y, dx, dy + 1));
      flow.u(y, x) = std::clamp(static_cast<float>(dx) + ox, -limit, limit);
      flow.v(y, x) = std::clamp(static_cast<float>(dy) + oy, -limit, limit);
    }
  }

  // Border band copies the nearest interior estimate.
  const int r = cfg.radius;
  for (int y = 0; y < h; ++y) {
    const int sy = std::clamp(y, r, h - 1 - r);
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x, r, w - 1 - r);
      if (sx != x || sy != y) {
        flow.u(y, x) = flow.u(sy, sx);
        flow.v(y, x) = flow.v(sy, sx);
      }
    }
  }
  return flow;
}

double flow_angle(double u, double v) {
  if (u == 0.0 && v == 0.0) return 0.0;
  double a = std::atan2(v, u);
  if (a < 0.0) a += 2.0 * std::numbers::pi;
  if (a >= 2.0 * std::numbers::pi) a = 0.0;
  return a;
}

std::pair<FloatMap, FloatMap> flow_magnitude_angle(const FlowField& flow) {
  FloatMap mag(flow.width(), flow.height());
  FloatMap ang(flow.width(), flow.height());
  for (Eigen::Index i = 0; i < flow.u.size(); ++i) {
    const double u = flow.u.data()[i];
    const double v = flow.v.data()[i];
    mag.values.data()[i] = static_cast<float>(std::hypot(u, v));
    ang.values.data()[i] = static_cast<float>(flow_angle(u, v));
  }
  return {std::move(mag), std::move(ang)};
}

}  // namespace marvis
