#pragma once

#include <array>
#include <cstdint>
#include <json.hpp>
#include <random>
#include <string>
#include <vector>

#include "marvis/imageio.hpp"
#include "marvis/tensor.hpp"

namespace marvis {

struct ModelConfig {
  std::array<int, 5> stage_channels{16, 32, 60, 100, 150};
  int cbam_reduction = 8;
  int token_mlp_ratio = 1;
  int input_channels = 2;
  std::uint64_t seed = 0;

  /// [4,8,16,16,32], used for tests and desk-scale training.
  static ModelConfig tiny();
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Shift offsets for a tokenized block of `channels` channels: the largest
/// group count G <= 5 dividing it, offsets symmetric around zero.
std::vector<int> shift_offsets(int channels);

/// Seeded Kaiming-uniform initializer shared by all layers of one model.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}
  /// Uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)].
  std::vector<double> kaiming(std::size_t count, int fan_in);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct CbamWeights {
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;  // C -> C/r -> C
  Tensor<T> spatial_w;                   // [1,2,7,7], no bias
};

/// Channel attention then spatial attention; output shape = input shape.
template <typename T>
Tensor<T> cbam(const Tensor<T>& x, const CbamWeights<T>& w);

template <typename T>
struct TokMlpWeights {
  Tensor<T> proj_w_w, proj_w_b;           // width pass tokenize, [E,E,3,3]
  std::vector<Tensor<T>> mlp_w;           // Linear(E,E) or Linear(E,rE), Linear(rE,E)
  Tensor<T> dw_w, dw_b;                   // [E,1,3,3]
  Tensor<T> proj_h_w, proj_h_b;           // height pass tokenize
  std::vector<Tensor<T>> mlp_h;
  Tensor<T> ln_g, ln_b;
};

/// Shifted tokenized MLP block; output shape = input shape.
template <typename T>
Tensor<T> tokenized_mlp(const Tensor<T>& x, const TokMlpWeights<T>& w);

/// The full encoder-decoder. Parameters live in a flat registry in
/// construction order; the layer structs alias the registry entries.
template <typename T>
class MarvisModel {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  explicit MarvisModel(const ModelConfig& cfg);

  /// x [N, input_channels, H, W] -> probabilities [N,1,H,W]. ShapeError
  /// unless H and W are positive multiples of 32.
  Tensor<T> forward(const Tensor<T>& x);
  /// Concatenates frame and LME map ([N,1,H,W] each) and runs forward.
  Tensor<T> forward(const Tensor<T>& frame, const Tensor<T>& lme);

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  const ModelConfig& config() const { return cfg_; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor<T>> parameters() const;
  void zero_grad();
  std::int64_t parameter_count() const;

  NamedArrays state_dict() const;
  /// Copies values in place. Missing, unexpected or mis-shaped tensors throw
  /// ShapeError naming them.
  void load_state_dict(const NamedArrays& state);

 private:
  struct ConvBn {
    Tensor<T> w, b, gamma, beta, mean, var;
  };
  struct Stage {
    std::vector<ConvBn> convs;
    bool has_cbam = false;
    CbamWeights<T> attn;
    Tensor<T> embed_w, embed_b;
    bool has_tok = false;
    TokMlpWeights<T> tok;
  };

  Tensor<T> add_param(const std::string& name, Shape shape, int fan_in);
  Tensor<T> add_const(const std::string& name, Shape shape, T value, bool trainable);
  ConvBn make_conv_bn(const std::string& prefix, int in, int out);
  CbamWeights<T> make_cbam(const std::string& prefix, int c);
  TokMlpWeights<T> make_tok(const std::string& prefix, int e);
  Tensor<T> conv_bn_relu(const Tensor<T>& x, ConvBn& l);

  ModelConfig cfg_;
  ParamInit init_;
  bool training_ = true;
  std::vector<Entry> entries_;
  std::array<Stage, 5> enc_;
  std::array<Stage, 5> dec_;
  Tensor<T> head_w_, head_b_;
};

/// Exact trainable-scalar count of the network built from `cfg`.
std::int64_t count_parameters(const ModelConfig& cfg);

extern template class MarvisModel<float>;
extern template class MarvisModel<double>;

}  // namespace marvis
