#include "marvis/lme.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "marvis/errors.hpp"
#include "marvis/imageio.hpp"

namespace marvis {

void LmeConfig::validate() const {
  if (receptive_field < 3 || receptive_field % 2 == 0)
    throw ConfigError("LME receptive field must be odd and >= 3, got " +
                      std::to_string(receptive_field));
  if (bins < 2 || bins > 256) throw ConfigError("LME bins must be in [2, 256]");
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(alpha + beta > 0.0))
    throw ConfigError("LME weights must be non-negative with a positive sum");
}

double LmeConfig::max_entropy() const { return (alpha + beta) * std::log2(static_cast<double>(bins)); }

FloatMap EntropyMap::to_floatmap() const { return FloatMap(values.cast<float>()); }

std::pair<FloatMap, FloatMap> normalize_flow_channels(const FlowField& flow) {
  const Eigen::Index n = flow.u.size();
  std::vector<double> mag(n);
  double max_mag = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    mag[i] = std::hypot(static_cast<double>(flow.u.data()[i]), static_cast<double>(flow.v.data()[i]));
    max_mag = std::max(max_mag, mag[i]);
  }
  const double denom = std::max(max_mag, 1e-12);
  FloatMap m_norm(flow.width(), flow.height());
  FloatMap a_norm(flow.width(), flow.height());
  for (Eigen::Index i = 0; i < n; ++i) {
    m_norm.values.data()[i] = static_cast<float>(std::clamp(mag[i] / denom, 0.0, 1.0));
    const double a = flow_angle(flow.u.data()[i], flow.v.data()[i]) / (2.0 * std::numbers::pi);
    a_norm.values.data()[i] = std::min(static_cast<float>(a), std::nextafter(1.0f, 0.0f));
  }
  return {std::move(m_norm), std::move(a_norm)};
}

namespace {

void check_inputs(const FloatMap& m, const FloatMap& a, const LmeConfig& cfg) {
  cfg.validate();
  if (m.width() != a.width() || m.height() != a.height())
    throw ShapeError("LME channels differ in shape");
  if (m.width() <= 0 || m.height() <= 0) throw ShapeError("LME input is empty");
}

// term[c] = -(c/n) log2(c/n); term[0] = 0.
std::vector<double> entropy_terms(int n) {
  std::vector<double> t(n + 1, 0.0);
  for (int c = 1; c <= n; ++c) {
    const double p = static_cast<double>(c) / n;
    t[c] = -p * std::log2(p);
  }
  return t;
}

// Shared by both kernels so the final arithmetic is identical.
double combine(double hm, double ha, const LmeConfig& cfg, double norm) {
  const double h = cfg.alpha * hm + cfg.beta * ha;
  return cfg.normalize_output ? h / norm : h;
}

}  // namespace

EntropyMap lme_brute(const FloatMap& m_norm, const FloatMap& a_norm, const LmeConfig& cfg) {
  check_inputs(m_norm, a_norm, cfg);
  const int w = m_norm.width(), h = m_norm.height();
  const int k = cfg.receptive_field, r = k / 2, bins = cfg.bins;
  const auto terms = entropy_terms(k * k);
  const double norm = cfg.max_entropy();

  EntropyMap out{Plane<double>(h, w), cfg};
  std::vector<int> hm(bins), ha(bins);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::fill(hm.begin(), hm.end(), 0);
      std::fill(ha.begin(), ha.end(), 0);
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = std::clamp(x + dx, 0, w - 1);
          ++hm[lme_bin(m_norm.values(yy, xx), bins)];
          ++ha[lme_bin(a_norm.values(yy, xx), bins)];
        }
      }
      double em = 0.0, ea = 0.0;
      for (int b = 0; b < bins; ++b) {
        em += terms[hm[b]];
        ea += terms[ha[b]];
      }
      out.values(y, x) = combine(em, ea, cfg, norm);
    }
  }
  return out;
}

namespace {

// Integer histogram with an occupancy bitmap so entropy only visits
// occupied bins, still in ascending bin order. Skipped bins contribute
// +0.0, which leaves the sum bit-identical to a full scan.
class SlidingHistogram {
 public:
  explicit SlidingHistogram(int bins) : counts_(bins, 0), words_((bins + 63) / 64, 0) {}

  void clear() {
    std::fill(counts_.begin(), counts_.end(), 0);
    std::fill(words_.begin(), words_.end(), 0);
  }
  void add(int b) {
    if (counts_[b]++ == 0) words_[b >> 6] |= std::uint64_t{1} << (b & 63);
  }
  void remove(int b) {
    if (--counts_[b] == 0) words_[b >> 6] &= ~(std::uint64_t{1} << (b & 63));
  }
  double entropy(const std::vector<double>& terms) const {
    double e = 0.0;
    for (std::size_t wi = 0; wi < words_.size(); ++wi) {
      std::uint64_t bits = words_[wi];
      while (bits) {
        const int b = static_cast<int>(wi * 64) + std::countr_zero(bits);
        e += terms[counts_[b]];
        bits &= bits - 1;
      }
    }
    return e;
  }

 private:
  std::vector<int> counts_;
  std::vector<std::uint64_t> words_;
};

}  // namespace

EntropyMap lme_fast(const FloatMap& m_norm, const FloatMap& a_norm, const LmeConfig& cfg) {
  check_inputs(m_norm, a_norm, cfg);
  const int w = m_norm.width(), h = m_norm.height();
  const int k = cfg.receptive_field, r = k / 2, bins = cfg.bins;
  const auto terms = entropy_terms(k * k);
  const double norm = cfg.max_entropy();

  // Quantize once.
  Plane<std::uint8_t> qm(h, w), qa(h, w);
  for (Eigen::Index i = 0; i < m_norm.values.size(); ++i) {
    qm.data()[i] = static_cast<std::uint8_t>(lme_bin(m_norm.values.data()[i], bins));
    qa.data()[i] = static_cast<std::uint8_t>(lme_bin(a_norm.values.data()[i], bins));
  }

  EntropyMap out{Plane<double>(h, w), cfg};
  SlidingHistogram hm(bins), ha(bins);
  std::vector<const std::uint8_t*> rows_m(k), rows_a(k);
  for (int y = 0; y < h; ++y) {
    for (int dy = -r; dy <= r; ++dy) {
      const int yy = std::clamp(y + dy, 0, h - 1);
      rows_m[dy + r] = qm.data() + static_cast<std::ptrdiff_t>(yy) * w;
      rows_a[dy + r] = qa.data() + static_cast<std::ptrdiff_t>(yy) * w;
    }
    hm.clear();
    ha.clear();
    for (int dx = -r; dx <= r; ++dx) {
      const int xx = std::clamp(dx, 0, w - 1);
      for (int i = 0; i < k; ++i) {
        hm.add(rows_m[i][xx]);
        ha.add(rows_a[i][xx]);
      }
    }
    out.values(y, 0) = combine(hm.entropy(terms), ha.entropy(terms), cfg, norm);
    for (int x = 1; x < w; ++x) {
      const int leave = std::max(x - 1 - r, 0);
      const int enter = std::min(x + r, w - 1);
      if (leave != enter) {
        for (int i = 0; i < k; ++i) {
          hm.remove(rows_m[i][leave]);
          ha.remove(rows_a[i][leave]);
          hm.add(rows_m[i][enter]);
          ha.add(rows_a[i][enter]);
        }
      }
      out.values(y, x) = combine(hm.entropy(terms), ha.entropy(terms), cfg, norm);
    }
  }
  return out;
}

EntropyMap lme_from_flow(const FlowField& flow, const LmeConfig& cfg) {
  const auto [m, a] = normalize_flow_channels(flow);
  return lme_fast(m, a, cfg);
}

EntropyMap lme_from_frames(const GrayImage& prev, const GrayImage& curr, const LmeConfig& cfg,
                           const std::optional<std::filesystem::path>& flow_file,
                           const FlowConfig& flow_cfg) {
  if (prev.width() != curr.width() || prev.height() != curr.height())
    throw ShapeError("lme_from_frames: frame dimensions differ");
  if (flow_file) {
    const FlowField flow = read_flo(*flow_file);
    if (flow.width() != prev.width() || flow.height() != prev.height())
      throw ShapeError("flow file " + flow_file->string() + " is " + std::to_string(flow.width()) +
                       "x" + std::to_string(flow.height()) + ", frames are " +
                       std::to_string(prev.width()) + "x" + std::to_string(prev.height()));
    return lme_from_flow(flow, cfg);
  }
  return lme_from_flow(estimate_flow(prev, curr, flow_cfg), cfg);
}

}  // namespace marvis
