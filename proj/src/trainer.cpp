#include "marvis/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "marvis/epipolar.hpp"
#include "marvis/errors.hpp"
#include "marvis/ops.hpp"

namespace marvis {

template <typename T>
void adamw_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamWConfig& cfg) {
  using Array = typename Tensor<T>::Array;
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.push_back(Array::Zero(p.numel()));
      state.v.push_back(Array::Zero(p.numel()));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("optimizer state holds " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i].numel())
      throw ShapeError("optimizer state for tensor " + std::to_string(i) + " has " +
                       std::to_string(state.m[i].size()) + " values, parameter has " +
                       std::to_string(params[i].numel()));

  ++state.step;
  const T lr = static_cast<T>(cfg.lr);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T c2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(cfg.lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i];
    Array& values = p.values();
    values -= decay * values;
    if (!p.has_grad()) {
      state.m[i] *= b1;
      state.v[i] *= b2;
    } else {
      const Array& g = p.grad();
      state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
      state.v[i] = b2 * state.v[i] + (T(1) - b2) * g.square();
    }
    values -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
  }
}

template void adamw_step(const std::vector<Tensor<float>>&, AdamState<float>&, const AdamWConfig&);
template void adamw_step(const std::vector<Tensor<double>>&, AdamState<double>&, const AdamWConfig&);

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must lie in (0,1]");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  weights.validate();
  lme.validate();
  model.validate();
}

void to_json(nlohmann::json& j, const LmeConfig& c) {
  j = nlohmann::json{{"receptive_field", c.receptive_field},
                     {"bins", c.bins},
                     {"alpha", c.alpha},
                     {"beta", c.beta},
                     {"normalize_output", c.normalize_output}};
}

void from_json(const nlohmann::json& j, LmeConfig& c) {
  const LmeConfig d;
  c.receptive_field = j.value("receptive_field", d.receptive_field);
  c.bins = j.value("bins", d.bins);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.normalize_output = j.value("normalize_output", d.normalize_output);
}

void to_json(nlohmann::json& j, const FlowConfig& c) {
  j = nlohmann::json{{"block", c.block},
                     {"radius", c.radius},
                     {"levels", c.levels},
                     {"refine_radius", c.refine_radius}};
}

void from_json(const nlohmann::json& j, FlowConfig& c) {
  const FlowConfig d;
  c.block = j.value("block", d.block);
  c.radius = j.value("radius", d.radius);
  c.levels = j.value("levels", d.levels);
  c.refine_radius = j.value("refine_radius", d.refine_radius);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"lr_decay", c.lr_decay},
                     {"weight_decay", c.weight_decay},
                     {"weights",
                      {{"lambda_b", c.weights.lambda_b},
                       {"lambda_d", c.weights.lambda_d},
                       {"lambda_e", c.weights.lambda_e}}},
                     {"seed", c.seed},
                     {"use_egc", c.use_egc},
                     {"estimated_flow", c.estimated_flow},
                     {"lme", c.lme},
                     {"flow", c.flow},
                     {"model", c.model}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.lr_decay = j.value("lr_decay", d.lr_decay);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.lambda_b = w.value("lambda_b", d.weights.lambda_b);
    c.weights.lambda_d = w.value("lambda_d", d.weights.lambda_d);
    c.weights.lambda_e = w.value("lambda_e", d.weights.lambda_e);
  }
  c.seed = j.value("seed", d.seed);
  c.use_egc = j.value("use_egc", d.use_egc);
  c.estimated_flow = j.value("estimated_flow", d.estimated_flow);
  c.lme = j.value("lme", d.lme);
  c.flow = j.value("flow", d.flow);
  c.model = j.value("model", d.model);
}

void to_json(nlohmann::json& j, const EpochLog& e) {
  j = nlohmann::json{{"epoch", e.epoch}, {"lr", e.lr},           {"loss", e.loss},
                     {"bce", e.bce},     {"dice", e.dice},       {"egc", e.egc},
                     {"val_iou", e.val_iou}, {"val_f1", e.val_f1}, {"seconds", e.seconds}};
}

PreparedSample prepare_sample(const DatasetManifest& manifest, const ManifestEntry& entry,
                              const TrainConfig& cfg, bool with_egc) {
  PreparedSample s;
  const GrayImage prev = read_pgm(manifest.resolve(entry.frame_prev_path));
  const GrayImage curr = read_pgm(manifest.resolve(entry.frame_curr_path));
  const BinaryMask mask = read_mask(manifest.resolve(entry.mask_path));
  if (mask.width() != curr.width() || mask.height() != curr.height())
    throw ShapeError("mask " + entry.mask_path + " does not match its frame");
  std::optional<fs::path> flow_file;
  if (!cfg.estimated_flow && entry.flow_path) flow_file = manifest.resolve(*entry.flow_path);
  s.lme = lme_from_frames(prev, curr, cfg.lme, flow_file, cfg.flow).to_floatmap().values;
  s.frame = curr.pixels;
  s.mask = mask.labels;
  if (with_egc && entry.stereo_right_path && entry.calib_id) {
    const GrayImage right = read_pgm(manifest.resolve(*entry.stereo_right_path));
    const StereoCalibration calib = read_calibration(manifest.calib_path(*entry.calib_id));
    s.egc = analyze_stereo(curr, right, fundamental_from_calibration(calib)).map.values;
  }
  return s;
}

namespace {

using TensorF = Tensor<float>;

struct Batch {
  TensorF input, target, egc;
};

Batch make_batch(const std::vector<PreparedSample>& data, const std::vector<std::size_t>& idx) {
  const int n = static_cast<int>(idx.size());
  const int h = static_cast<int>(data[idx[0]].frame.rows());
  const int w = static_cast<int>(data[idx[0]].frame.cols());
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  TensorF::Array input(2 * n * plane), target(n * plane), egc = TensorF::Array::Zero(n * plane);
  bool any_egc = false;
  for (int b = 0; b < n; ++b) {
    const PreparedSample& s = data[idx[b]];
    if (s.frame.rows() != h || s.frame.cols() != w)
      throw ShapeError("samples in one batch differ in size");
    input.segment(2 * b * plane, plane) = s.frame.reshaped<Eigen::RowMajor>();
    input.segment((2 * b + 1) * plane, plane) = s.lme.reshaped<Eigen::RowMajor>();
    target.segment(b * plane, plane) = s.mask.cast<float>().reshaped<Eigen::RowMajor>();
    if (s.egc) {
      egc.segment(b * plane, plane) = s.egc->reshaped<Eigen::RowMajor>();
      any_egc = true;
    }
  }
  Batch batch;
  batch.input = TensorF::from_values({n, 2, h, w}, std::move(input));
  batch.target = TensorF::from_values({n, 1, h, w}, std::move(target));
  if (any_egc) batch.egc = TensorF::from_values({n, 1, h, w}, std::move(egc));
  return batch;
}

std::vector<PreparedSample> prepare_split(const DatasetManifest& manifest, Split split,
                                          const TrainConfig& cfg, bool with_egc) {
  std::vector<PreparedSample> out;
  for (std::size_t i : manifest.indices(split))
    out.push_back(prepare_sample(manifest, manifest.entries[i], cfg, with_egc));
  return out;
}

void write_sidecar(const fs::path& checkpoint, const TrainConfig& cfg) {
  nlohmann::json j{{"model", cfg.model}, {"lme", cfg.lme}, {"flow", cfg.flow}, {"train", cfg}};
  std::ofstream out(sidecar_path(checkpoint));
  if (!out) throw IoError("cannot write " + sidecar_path(checkpoint).string());
  out << j.dump(2) << "\n";
}

std::pair<double, double> validate_model(MarvisModel<float>& model, const std::vector<PreparedSample>& val) {
  NoGradGuard no_grad;
  model.set_training(false);
  double iou = 0, f1 = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const Batch b = make_batch(val, {i});
    const TensorF prob = model.forward(b.input);
    FloatMap pm(PlaneF(Eigen::Map<const PlaneF>(prob.values().data(), val[i].frame.rows(), val[i].frame.cols())));
    const EvalReport r = evaluate(pm, BinaryMask(val[i].mask));
    iou += r.iou;
    f1 += r.f1;
  }
  model.set_training(true);
  const double n = static_cast<double>(std::max<std::size_t>(val.size(), 1));
  return {iou / n, f1 / n};
}

}  // namespace

TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const bool with_egc = cfg.use_egc && cfg.weights.lambda_e > 0;
  const std::vector<PreparedSample> train_set = prepare_split(manifest, Split::kTrain, cfg, with_egc);
  const std::vector<PreparedSample> val_set = prepare_split(manifest, Split::kVal, cfg, false);
  if (train_set.empty()) throw ConfigError("manifest has no training entries");
  if (val_set.empty()) throw ConfigError("manifest has no validation entries");
  for (const auto& s : train_set)
    if (s.frame.rows() % 32 != 0 || s.frame.cols() % 32 != 0)
      throw ConfigError("training frames must be multiples of 32 in both dimensions");

  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "log.jsonl");
  if (!log) throw IoError("cannot write " + (out_dir / "log.jsonl").string());

  MarvisModel<float> model(cfg.model);
  model.set_training(true);
  const std::vector<TensorF> params = model.parameters();
  AdamState<float> opt;
  AdamWConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  result.best_checkpoint = out_dir / "best.mrvs";
  result.last_checkpoint = out_dir / "last.mrvs";
  double best_iou = -1;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    EpochLog rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + cfg.batch_size));
      const Batch b = make_batch(train_set, idx);
      model.zero_grad();
      const TensorF pred = model.forward(b.input);
      const TensorF loss = composite_loss(pred, b.target, b.egc, cfg.weights);
      double bce, dice, egc = 0;
      {
        NoGradGuard no_grad;
        const TensorF p = pred.clone();
        bce = bce_loss(p, b.target).item();
        dice = dice_loss(p, b.target).item();
        if (b.egc.defined()) egc = egc_loss(p, b.egc).item();
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " step " << step << " (lr " << adam.lr
            << "): total " << value << ", bce " << bce << ", dice " << dice << ", egc " << egc;
        throw NumericError(msg.str());
      }
      backward(loss);
      adamw_step(params, opt, adam);
      rec.loss += value;
      rec.bce += bce;
      rec.dice += dice;
      rec.egc += egc;
      ++batches;
      ++step;
    }
    rec.loss /= batches;
    rec.bce /= batches;
    rec.dice /= batches;
    rec.egc /= batches;
    std::tie(rec.val_iou, rec.val_f1) = validate_model(model, val_set);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (rec.val_iou > best_iou) {
      best_iou = rec.val_iou;
      result.best_epoch = epoch;
      save_checkpoint(model.state_dict(), result.best_checkpoint);
      write_sidecar(result.best_checkpoint, cfg);
    }
    log << nlohmann::json(rec).dump() << "\n";
    log.flush();
    result.history.push_back(rec);
    adam.lr *= cfg.lr_decay;
  }
  save_checkpoint(model.state_dict(), result.last_checkpoint);
  write_sidecar(result.last_checkpoint, cfg);
  return result;
}

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  return p.replace_extension(".json");
}

PlaneF reflect_pad(const PlaneF& in, int height, int width) {
  const auto fold = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  if (height < in.rows() || width < in.cols()) throw ShapeError("reflect_pad cannot shrink");
  PlaneF out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out(y, x) = in(fold(y, static_cast<int>(in.rows())), fold(x, static_cast<int>(in.cols())));
  return out;
}

Predictor::Predictor(const fs::path& checkpoint) {
  const fs::path side = sidecar_path(checkpoint);
  std::ifstream in(side);
  if (!in) throw IoError("missing checkpoint config " + side.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side.string() + ": " + e.what());
  }
  lme_ = j.value("lme", LmeConfig{});
  model_ = std::make_unique<MarvisModel<float>>(j.value("model", ModelConfig{}));
  model_->load_state_dict(load_checkpoint(checkpoint));
  model_->set_training(false);
}

Predictor::Predictor(const ModelConfig& model, const LmeConfig& lme, const NamedArrays& state)
    : lme_(lme), model_(std::make_unique<MarvisModel<float>>(model)) {
  model_->load_state_dict(state);
  model_->set_training(false);
}

InferResult Predictor::predict(const GrayImage& curr, const FloatMap& lme) const {
  const int h = curr.height(), w = curr.width();
  if (lme.width() != w || lme.height() != h) throw ShapeError("LME map does not match the frame");
  if (h < 1 || w < 1) throw ShapeError("empty frame");
  const int ph = (h + 31) / 32 * 32, pw = (w + 31) / 32 * 32;
  const Eigen::Index plane = static_cast<Eigen::Index>(ph) * pw;
  TensorF::Array input(2 * plane);
  input.head(plane) = reflect_pad(curr.pixels, ph, pw).reshaped<Eigen::RowMajor>();
  input.tail(plane) = reflect_pad(lme.values, ph, pw).reshaped<Eigen::RowMajor>();
  NoGradGuard no_grad;
  const TensorF prob = model_->forward(TensorF::from_values({1, 2, ph, pw}, std::move(input)));
  const Eigen::Map<const PlaneF> full(prob.values().data(), ph, pw);
  InferResult r;
  r.prob = FloatMap(PlaneF(full.topLeftCorner(h, w)));
  r.mask = BinaryMask(PlaneU8((r.prob.values >= 0.5f).cast<std::uint8_t>()));
  return r;
}

InferResult Predictor::predict_frames(const GrayImage& prev, const GrayImage& curr,
                                      const std::optional<FlowField>& flow,
                                      const FlowConfig& flow_cfg) const {
  if (prev.width() != curr.width() || prev.height() != curr.height())
    throw ShapeError("frames differ in size");
  FlowField f;
  if (flow) {
    if (flow->width() != curr.width() || flow->height() != curr.height())
      throw ShapeError("flow field does not match the frames");
    f = *flow;
  } else {
    // Small frames get fewer pyramid levels instead of failing.
    FlowConfig fc = flow_cfg;
    const int need = fc.block + 2 * fc.radius;
    while (fc.levels > 1 && std::min(curr.width(), curr.height()) >> (fc.levels - 1) < need) --fc.levels;
    f = estimate_flow(prev, curr, fc);
  }
  return predict(curr, lme_from_flow(f, lme_).to_floatmap());
}

InferResult infer(const fs::path& checkpoint, const GrayImage& prev, const GrayImage& curr,
                  const std::optional<FlowField>& flow) {
  return Predictor(checkpoint).predict_frames(prev, curr, flow);
}

}  // namespace marvis
