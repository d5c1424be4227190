#pragma once

#include <cstdint>
#include <json.hpp>

#include "marvis/image.hpp"
#include "marvis/tensor.hpp"

namespace marvis {

struct LossWeights {
  double lambda_b = 0.8;
  double lambda_d = 0.1;
  double lambda_e = 0.1;

  /// Throws ConfigError on a negative weight.
  void validate() const;
};

inline constexpr double kBceClip = 1e-7;
inline constexpr double kDiceEps = 1e-7;

// Targets and EGC maps are constant tensors of the prediction's shape. The
// BinaryMask / FloatMap overloads expect a [1,1,H,W] prediction.

/// Mean binary cross-entropy (natural log) with predictions clipped to
/// [1e-7, 1-1e-7]; clipped pixels pass no gradient.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// 1 - 2*sum(y*p) / (sum(y^2) + sum(p^2) + 1e-7).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// sum((1-p)*E) / count(E != 0); zero (and gradient-free) when E is all zero.
template <typename T>
Tensor<T> egc_loss(const Tensor<T>& pred, const Tensor<T>& egc_map);

/// Weighted sum; the EGC term is skipped when egc_map is undefined.
template <typename T>
Tensor<T> composite_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& egc_map,
                         const LossWeights& weights);

Tensor<double> mask_tensor(const BinaryMask& mask);
Tensor<double> map_tensor(const FloatMap& map);
Tensor<double> bce_loss(const Tensor<double>& pred, const BinaryMask& target);
Tensor<double> dice_loss(const Tensor<double>& pred, const BinaryMask& target);
Tensor<double> egc_loss(const Tensor<double>& pred, const FloatMap& egc_map);

struct EvalReport {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double iou = 0, f1 = 0, precision = 0, recall = 0;

  /// Recomputes the ratios from the counts.
  void finalize();
  EvalReport& operator+=(const EvalReport& other);
};

/// Binarizes at prob >= threshold; label 1 is the positive class.
EvalReport evaluate(const FloatMap& prob, const BinaryMask& target, double threshold = 0.5);

void to_json(nlohmann::json& j, const EvalReport& r);

}  // namespace marvis
