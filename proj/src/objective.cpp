#include "marvis/objective.hpp"

#include <cmath>

#include "marvis/errors.hpp"
#include "marvis/ops.hpp"

namespace marvis {

void LossWeights::validate() const {
  if (!(lambda_b >= 0) || !(lambda_d >= 0) || !(lambda_e >= 0))
    throw ConfigError("loss weights must be non-negative");
}

namespace {

template <typename T>
void require_match(const Tensor<T>& pred, const Tensor<T>& other, const char* what) {
  if (!pred.defined() || !other.defined() || pred.shape() != other.shape())
    throw ShapeError(std::string(what) + ": prediction " +
                     (pred.defined() ? shape_str(pred.shape()) : "<undefined>") + " vs " +
                     (other.defined() ? shape_str(other.shape()) : "<undefined>"));
  if (pred.numel() == 0) throw ShapeError(std::string(what) + ": empty prediction");
}

}  // namespace

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_match(pred, target, "bce_loss");
  using Array = typename Tensor<T>::Array;
  const T lo = static_cast<T>(kBceClip), hi = T(1) - static_cast<T>(kBceClip);
  const Array p = pred.values().max(lo).min(hi);
  const Array y = target.values();
  const T n = static_cast<T>(pred.numel());
  Array v(1);
  v[0] = -(y * p.log() + (T(1) - y) * (T(1) - p).log()).sum() / n;
  return detail::make_result<T>(Shape{}, std::move(v), {pred}, [lo, hi, n, y](TensorNode<T>& self) {
    auto* g = detail::input_grad(self, 0);
    if (!g) return;
    const Array& raw = self.inputs[0]->value;
    const Array p = raw.max(lo).min(hi);
    const Array d = (p - y) / (p * (T(1) - p) * n);
    *g += self.grad[0] * ((raw > lo) && (raw < hi)).select(d, T(0));
  });
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_match(pred, target, "dice_loss");
  using Array = typename Tensor<T>::Array;
  const Array y = target.values();
  const Array& p = pred.values();
  const T num = T(2) * (y * p).sum();
  const T den = y.square().sum() + p.square().sum() + static_cast<T>(kDiceEps);
  Array v(1);
  v[0] = T(1) - num / den;
  return detail::make_result<T>(Shape{}, std::move(v), {pred}, [y, num, den](TensorNode<T>& self) {
    auto* g = detail::input_grad(self, 0);
    if (!g) return;
    const Array& p = self.inputs[0]->value;
    // d/dp (1 - num/den) = -(2y*den - num*2p) / den^2
    *g += self.grad[0] * (-(T(2) * y * den - num * T(2) * p) / (den * den));
  });
}

template <typename T>
Tensor<T> egc_loss(const Tensor<T>& pred, const Tensor<T>& egc_map) {
  require_match(pred, egc_map, "egc_loss");
  using Array = typename Tensor<T>::Array;
  const Array e = egc_map.values();
  const Eigen::Index count = (e != T(0)).count();
  if (count == 0) return Tensor<T>::scalar(T(0));
  const T c = static_cast<T>(count);
  Array v(1);
  v[0] = ((T(1) - pred.values()) * e).sum() / c;
  return detail::make_result<T>(Shape{}, std::move(v), {pred}, [e, c](TensorNode<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g -= self.grad[0] * e / c;
  });
}

template <typename T>
Tensor<T> composite_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& egc_map,
                         const LossWeights& weights) {
  weights.validate();
  Tensor<T> total = add(scale(bce_loss(pred, target), static_cast<T>(weights.lambda_b)),
                        scale(dice_loss(pred, target), static_cast<T>(weights.lambda_d)));
  if (egc_map.defined())
    total = add(total, scale(egc_loss(pred, egc_map), static_cast<T>(weights.lambda_e)));
  return total;
}

template Tensor<float> bce_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_loss(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> dice_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> dice_loss(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> egc_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> egc_loss(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> composite_loss(const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&, const LossWeights&);
template Tensor<double> composite_loss(const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, const LossWeights&);

Tensor<double> mask_tensor(const BinaryMask& mask) {
  Tensor<double>::Array v(mask.labels.size());
  Eigen::Map<Plane<double>>(v.data(), mask.height(), mask.width()) = mask.labels.cast<double>();
  return Tensor<double>::from_values(Shape{1, 1, mask.height(), mask.width()}, std::move(v));
}

Tensor<double> map_tensor(const FloatMap& map) {
  Tensor<double>::Array v(map.values.size());
  Eigen::Map<Plane<double>>(v.data(), map.height(), map.width()) = map.values.cast<double>();
  return Tensor<double>::from_values(Shape{1, 1, map.height(), map.width()}, std::move(v));
}

Tensor<double> bce_loss(const Tensor<double>& pred, const BinaryMask& target) {
  return bce_loss(pred, mask_tensor(target));
}
Tensor<double> dice_loss(const Tensor<double>& pred, const BinaryMask& target) {
  return dice_loss(pred, mask_tensor(target));
}
Tensor<double> egc_loss(const Tensor<double>& pred, const FloatMap& egc_map) {
  return egc_loss(pred, map_tensor(egc_map));
}

void EvalReport::finalize() {
  const auto ratio = [](std::int64_t a, std::int64_t b) {
    return b > 0 ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  precision = ratio(tp, tp + fp);
  recall = ratio(tp, tp + fn);
  if (tp + fp + fn == 0) {
    iou = 1.0;
    f1 = 1.0;
    return;
  }
  iou = ratio(tp, tp + fp + fn);
  f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

EvalReport& EvalReport::operator+=(const EvalReport& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  tn += other.tn;
  finalize();
  return *this;
}

EvalReport evaluate(const FloatMap& prob, const BinaryMask& target, double threshold) {
  if (prob.width() != target.width() || prob.height() != target.height())
    throw ShapeError("evaluate: prediction " + std::to_string(prob.width()) + "x" +
                     std::to_string(prob.height()) + " vs target " +
                     std::to_string(target.width()) + "x" + std::to_string(target.height()));
  const auto predicted = (prob.values >= static_cast<float>(threshold));
  const auto actual = (target.labels != 0);
  EvalReport r;
  r.tp = (predicted && actual).count();
  r.fp = (predicted && !actual).count();
  r.fn = (!predicted && actual).count();
  r.tn = (!predicted && !actual).count();
  r.finalize();
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"iou", r.iou},         {"f1", r.f1}, {"precision", r.precision},
                     {"recall", r.recall},   {"tp", r.tp}, {"fp", r.fp},
                     {"fn", r.fn},           {"tn", r.tn}};
}

}  // namespace marvis
