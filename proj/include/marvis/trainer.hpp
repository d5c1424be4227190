#pragma once

#include <cstdint>
#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "marvis/flow.hpp"
#include "marvis/imageio.hpp"
#include "marvis/lme.hpp"
#include "marvis/model.hpp"
#include "marvis/objective.hpp"

namespace marvis {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  std::vector<typename Tensor<T>::Array> m, v;
  std::int64_t step = 0;
};

/// Decoupled weight decay (p -= lr*wd*p) followed by the bias-corrected Adam
/// update, using each tensor's accumulated grad (zero when absent). The
/// state is sized on the first call; later size mismatches throw ShapeError.
template <typename T>
void adamw_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamWConfig& cfg);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 4;
  double lr = 1e-3;
  double lr_decay = 0.9;
  double weight_decay = 0.01;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool use_egc = true;
  bool estimated_flow = false;  ///< block matching instead of the manifest's .flo files
  LmeConfig lme;
  FlowConfig flow;
  ModelConfig model;

  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const LmeConfig& c);
void from_json(const nlohmann::json& j, LmeConfig& c);
void to_json(nlohmann::json& j, const FlowConfig& c);
void from_json(const nlohmann::json& j, FlowConfig& c);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0, bce = 0, dice = 0, egc = 0;  ///< means over training steps
  double val_iou = 0, val_f1 = 0;               ///< macro means over validation images
  double seconds = 0;
};

void to_json(nlohmann::json& j, const EpochLog& e);

struct TrainResult {
  fs::path best_checkpoint;
  fs::path last_checkpoint;
  std::vector<EpochLog> history;
  int best_epoch = 0;
};

/// Model input and targets for one manifest entry.
struct PreparedSample {
  PlaneF frame;
  PlaneF lme;
  PlaneU8 mask;
  std::optional<PlaneF> egc;  ///< normalized epipolar error map
};

/// Loads an entry and computes its LME map (from the .flo file unless
/// `estimated_flow` is set or the entry has none) and, when requested and
/// available, its epipolar error map under the calibrated F.
PreparedSample prepare_sample(const DatasetManifest& manifest, const ManifestEntry& entry,
                              const TrainConfig& cfg, bool with_egc);

/// Runs the optimization and writes log.jsonl, best.mrvs, last.mrvs and
/// their .json config sidecars into out_dir. NaN or infinite losses throw
/// NumericError with the step, lr and loss components.
TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg, const fs::path& out_dir);

struct InferResult {
  FloatMap prob;
  BinaryMask mask;
};

/// A checkpoint plus its sidecar config, ready for inference.
class Predictor {
 public:
  explicit Predictor(const fs::path& checkpoint);
  Predictor(const ModelConfig& model, const LmeConfig& lme, const NamedArrays& state);

  /// Any frame size: inputs are reflect-padded to a multiple of 32 and the
  /// outputs cropped back.
  InferResult predict(const GrayImage& curr, const FloatMap& lme) const;
  InferResult predict_frames(const GrayImage& prev, const GrayImage& curr,
                             const std::optional<FlowField>& flow = std::nullopt,
                             const FlowConfig& flow_cfg = {}) const;

  const LmeConfig& lme_config() const { return lme_; }

 private:
  LmeConfig lme_;
  std::unique_ptr<MarvisModel<float>> model_;
};

InferResult infer(const fs::path& checkpoint, const GrayImage& prev, const GrayImage& curr,
                  const std::optional<FlowField>& flow = std::nullopt);

/// Mirror padding (edge pixel not repeated) to the given size.
PlaneF reflect_pad(const PlaneF& in, int height, int width);

/// Sidecar path for a checkpoint: same stem, .json extension.
fs::path sidecar_path(const fs::path& checkpoint);

}  // namespace marvis
