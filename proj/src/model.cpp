#include "marvis/model.hpp"

#include <cmath>
#include <map>

#include "marvis/errors.hpp"
#include "marvis/ops.hpp"

namespace marvis {

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.stage_channels = {4, 8, 16, 16, 32};
  return c;
}

void ModelConfig::validate() const {
  for (int c : stage_channels)
    if (c < 1) throw ConfigError("stage channels must be positive");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  if (token_mlp_ratio < 1) throw ConfigError("token_mlp_ratio must be >= 1");
  if (cbam_reduction < 1) throw ConfigError("cbam_reduction must be >= 1");
  for (int i = 1; i <= 3; ++i)
    if (stage_channels[i] < cbam_reduction)
      throw ConfigError("stage " + std::to_string(i + 1) + " has " +
                        std::to_string(stage_channels[i]) + " channels, fewer than the attention reduction " +
                        std::to_string(cbam_reduction));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"stage_channels", c.stage_channels},
                     {"cbam_reduction", c.cbam_reduction},
                     {"token_mlp_ratio", c.token_mlp_ratio},
                     {"input_channels", c.input_channels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.stage_channels = j.value("stage_channels", d.stage_channels);
  c.cbam_reduction = j.value("cbam_reduction", d.cbam_reduction);
  c.token_mlp_ratio = j.value("token_mlp_ratio", d.token_mlp_ratio);
  c.input_channels = j.value("input_channels", d.input_channels);
  c.seed = j.value("seed", d.seed);
}

std::vector<int> shift_offsets(int channels) {
  int groups = 1;
  for (int g = 5; g >= 1; --g)
    if (channels % g == 0) {
      groups = g;
      break;
    }
  std::vector<int> offsets;
  for (int i = -groups / 2; i <= groups / 2; ++i)
    if (groups % 2 == 1 || i != 0) offsets.push_back(i);
  return offsets;
}

std::vector<double> ParamInit::kaiming(std::size_t count, int fan_in) {
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> out(count);
  for (auto& v : out) v = dist(rng_);
  return out;
}

template <typename T>
Tensor<T> cbam(const Tensor<T>& x, const CbamWeights<T>& w) {
  if (!x.defined() || x.rank() != 4) throw ShapeError("cbam: expected an NCHW input");
  const int c = x.dim(1);
  if (w.fc1_w.dim(1) != c || w.fc2_w.dim(0) != c)
    throw ShapeError("cbam: weights for " + std::to_string(w.fc1_w.dim(1)) + " channels, input has " +
                     std::to_string(c));
  const auto mlp = [&](const Tensor<T>& v) {
    return linear(relu(linear(v, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
  };
  const Tensor<T> channel_att = sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
  const Tensor<T> x1 = scale_channels(x, channel_att);
  const Tensor<T> pooled = concat_channels<T>({channel_mean(x1), channel_max(x1)});
  const int pad = w.spatial_w.dim(2) / 2;
  return scale_spatial(x1, sigmoid(conv2d(pooled, w.spatial_w, Tensor<T>(), 1, pad)));
}

namespace {

template <typename T>
Tensor<T> token_mlp(const Tensor<T>& t, const std::vector<Tensor<T>>& layers) {
  Tensor<T> h = linear(t, layers[0], layers[1]);
  for (std::size_t i = 2; i + 1 < layers.size(); i += 2) h = linear(gelu(h), layers[i], layers[i + 1]);
  return h;
}

}  // namespace

template <typename T>
Tensor<T> tokenized_mlp(const Tensor<T>& x, const TokMlpWeights<T>& w) {
  if (!x.defined() || x.rank() != 4) throw ShapeError("tokenized_mlp: expected an NCHW input");
  const int e = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (w.ln_g.numel() != e)
    throw ShapeError("tokenized_mlp: block width " + std::to_string(w.ln_g.numel()) +
                     ", input has " + std::to_string(e) + " channels");
  const std::vector<int> offsets = shift_offsets(e);

  Tensor<T> t = tokenize(axial_shift(x, ShiftAxis::kWidth, offsets), w.proj_w_w, w.proj_w_b);
  t = token_mlp(t, w.mlp_w);
  const Tensor<T> y = gelu(depthwise_conv2d(detokenize(t, h, wd), w.dw_w, w.dw_b, 1, 1));

  const Tensor<T> residual = to_tokens(y);
  Tensor<T> t2 = gelu(tokenize(axial_shift(y, ShiftAxis::kHeight, offsets), w.proj_h_w, w.proj_h_b));
  t2 = token_mlp(t2, w.mlp_h);
  return detokenize(gelu(layer_norm(add(residual, t2), w.ln_g, w.ln_b)), h, wd);
}

template <typename T>
MarvisModel<T>::MarvisModel(const ModelConfig& cfg) : cfg_(cfg), init_(cfg.seed) {
  cfg_.validate();
  const auto& c = cfg_.stage_channels;
  const int in = cfg_.input_channels;

  // Encoder.
  enc_[0].convs = {make_conv_bn("enc1.conv1", in, c[0]), make_conv_bn("enc1.conv2", c[0], c[0])};
  for (int s = 1; s <= 2; ++s) {
    const std::string p = "enc" + std::to_string(s + 1);
    enc_[s].convs = {make_conv_bn(p + ".conv1", c[s - 1], c[s]), make_conv_bn(p + ".conv2", c[s], c[s])};
    enc_[s].has_cbam = true;
    enc_[s].attn = make_cbam(p + ".cbam", c[s]);
  }
  for (int s = 3; s <= 4; ++s) {
    const std::string p = "enc" + std::to_string(s + 1);
    enc_[s].embed_w = add_param(p + ".embed.weight", {c[s], c[s - 1], 3, 3}, c[s - 1] * 9);
    enc_[s].embed_b = add_const(p + ".embed.bias", {c[s]}, T(0), true);
    enc_[s].has_tok = true;
    enc_[s].tok = make_tok(p + ".tok", c[s]);
  }
  enc_[3].has_cbam = true;
  enc_[3].attn = make_cbam("enc4.cbam", c[3]);

  // Decoder: dec5 and dec4 mirror the tokenized stages, dec3..dec1 the conv stages.
  dec_[4].convs = {make_conv_bn("dec5.conv1", c[4] + c[3], c[3])};
  dec_[4].has_tok = true;
  dec_[4].tok = make_tok("dec5.tok", c[3]);
  dec_[3].convs = {make_conv_bn("dec4.conv1", c[3] + c[2], c[2])};
  dec_[3].has_tok = true;
  dec_[3].tok = make_tok("dec4.tok", c[2]);
  dec_[2].convs = {make_conv_bn("dec3.conv1", c[2] + c[1], c[1]), make_conv_bn("dec3.conv2", c[1], c[1])};
  dec_[1].convs = {make_conv_bn("dec2.conv1", c[1] + c[0], c[0]), make_conv_bn("dec2.conv2", c[0], c[0])};
  dec_[0].convs = {make_conv_bn("dec1.conv1", c[0] + in, c[0]), make_conv_bn("dec1.conv2", c[0], c[0])};

  head_w_ = add_param("head.weight", {1, c[0], 1, 1}, c[0]);
  head_b_ = add_const("head.bias", {1}, T(0), true);
}

template <typename T>
Tensor<T> MarvisModel<T>::add_param(const std::string& name, Shape shape, int fan_in) {
  const auto init = init_.kaiming(static_cast<std::size_t>(shape_numel(shape)), fan_in);
  typename Tensor<T>::Array v(static_cast<Eigen::Index>(init.size()));
  for (std::size_t i = 0; i < init.size(); ++i) v[static_cast<Eigen::Index>(i)] = static_cast<T>(init[i]);
  Tensor<T> t = Tensor<T>::from_values(shape, std::move(v), true);
  entries_.push_back({name, t, true});
  return t;
}

template <typename T>
Tensor<T> MarvisModel<T>::add_const(const std::string& name, Shape shape, T value, bool trainable) {
  Tensor<T> t = Tensor<T>::full(shape, value, trainable);
  entries_.push_back({name, t, trainable});
  return t;
}

template <typename T>
typename MarvisModel<T>::ConvBn MarvisModel<T>::make_conv_bn(const std::string& prefix, int in, int out) {
  ConvBn l;
  l.w = add_param(prefix + ".weight", {out, in, 3, 3}, in * 9);
  l.b = add_const(prefix + ".bias", {out}, T(0), true);
  l.gamma = add_const(prefix + ".bn.weight", {out}, T(1), true);
  l.beta = add_const(prefix + ".bn.bias", {out}, T(0), true);
  l.mean = add_const(prefix + ".bn.running_mean", {out}, T(0), false);
  l.var = add_const(prefix + ".bn.running_var", {out}, T(1), false);
  return l;
}

template <typename T>
CbamWeights<T> MarvisModel<T>::make_cbam(const std::string& prefix, int c) {
  const int hidden = std::max(c / cfg_.cbam_reduction, 1);
  CbamWeights<T> w;
  w.fc1_w = add_param(prefix + ".fc1.weight", {hidden, c}, c);
  w.fc1_b = add_const(prefix + ".fc1.bias", {hidden}, T(0), true);
  w.fc2_w = add_param(prefix + ".fc2.weight", {c, hidden}, hidden);
  w.fc2_b = add_const(prefix + ".fc2.bias", {c}, T(0), true);
  w.spatial_w = add_param(prefix + ".spatial.weight", {1, 2, 7, 7}, 2 * 49);
  return w;
}

template <typename T>
TokMlpWeights<T> MarvisModel<T>::make_tok(const std::string& prefix, int e) {
  const int r = cfg_.token_mlp_ratio;
  const auto make_mlp = [&](const std::string& p) {
    std::vector<Tensor<T>> layers;
    if (r == 1) {
      layers.push_back(add_param(p + ".fc1.weight", {e, e}, e));
      layers.push_back(add_const(p + ".fc1.bias", {e}, T(0), true));
    } else {
      layers.push_back(add_param(p + ".fc1.weight", {r * e, e}, e));
      layers.push_back(add_const(p + ".fc1.bias", {r * e}, T(0), true));
      layers.push_back(add_param(p + ".fc2.weight", {e, r * e}, r * e));
      layers.push_back(add_const(p + ".fc2.bias", {e}, T(0), true));
    }
    return layers;
  };
  TokMlpWeights<T> w;
  w.proj_w_w = add_param(prefix + ".proj_w.weight", {e, e, 3, 3}, e * 9);
  w.proj_w_b = add_const(prefix + ".proj_w.bias", {e}, T(0), true);
  w.mlp_w = make_mlp(prefix + ".mlp_w");
  w.dw_w = add_param(prefix + ".dwconv.weight", {e, 1, 3, 3}, 9);
  w.dw_b = add_const(prefix + ".dwconv.bias", {e}, T(0), true);
  w.proj_h_w = add_param(prefix + ".proj_h.weight", {e, e, 3, 3}, e * 9);
  w.proj_h_b = add_const(prefix + ".proj_h.bias", {e}, T(0), true);
  w.mlp_h = make_mlp(prefix + ".mlp_h");
  w.ln_g = add_const(prefix + ".norm.weight", {e}, T(1), true);
  w.ln_b = add_const(prefix + ".norm.bias", {e}, T(0), true);
  return w;
}

template <typename T>
Tensor<T> MarvisModel<T>::conv_bn_relu(const Tensor<T>& x, ConvBn& l) {
  return relu(batch_norm(conv2d(x, l.w, l.b, 1, 1), l.gamma, l.beta, l.mean, l.var, training_));
}

template <typename T>
Tensor<T> MarvisModel<T>::forward(const Tensor<T>& x) {
  if (!x.defined() || x.rank() != 4 || x.dim(1) != cfg_.input_channels)
    throw ShapeError("model input must be [N," + std::to_string(cfg_.input_channels) +
                     ",H,W], got " + (x.defined() ? shape_str(x.shape()) : "<undefined>"));
  if (x.dim(2) < 32 || x.dim(3) < 32 || x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
    throw ShapeError("model input " + std::to_string(x.dim(3)) + "x" + std::to_string(x.dim(2)) +
                     " is not a multiple of 32");

  std::array<Tensor<T>, 5> skip;
  Tensor<T> h = x;
  for (int s = 0; s < 3; ++s) {
    for (auto& l : enc_[s].convs) h = conv_bn_relu(h, l);
    if (enc_[s].has_cbam) h = cbam(h, enc_[s].attn);
    h = maxpool2(h);
    skip[s] = h;
  }
  for (int s = 3; s < 5; ++s) {
    h = conv2d(h, enc_[s].embed_w, enc_[s].embed_b, 2, 1);
    h = tokenized_mlp(h, enc_[s].tok);
    if (enc_[s].has_cbam) h = cbam(h, enc_[s].attn);
    skip[s] = h;
  }

  for (int s = 4; s >= 0; --s) {
    const Tensor<T>& bridge = s > 0 ? skip[s - 1] : x;
    h = concat_channels<T>({bilinear_upsample2(h), bridge});
    for (auto& l : dec_[s].convs) h = conv_bn_relu(h, l);
    if (dec_[s].has_tok) h = tokenized_mlp(h, dec_[s].tok);
  }
  return sigmoid(conv2d(h, head_w_, head_b_, 1, 0));
}

template <typename T>
Tensor<T> MarvisModel<T>::forward(const Tensor<T>& frame, const Tensor<T>& lme) {
  return forward(concat_channels<T>({frame, lme}));
}

template <typename T>
std::vector<Tensor<T>> MarvisModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

template <typename T>
void MarvisModel<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
std::int64_t MarvisModel<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

template <typename T>
NamedArrays MarvisModel<T>::state_dict() const {
  NamedArrays out;
  for (const auto& e : entries_) {
    NamedArray a;
    a.name = e.name;
    a.shape.assign(e.tensor.shape().begin(), e.tensor.shape().end());
    a.values.resize(static_cast<std::size_t>(e.tensor.numel()));
    for (Eigen::Index i = 0; i < e.tensor.numel(); ++i)
      a.values[static_cast<std::size_t>(i)] = static_cast<float>(e.tensor.values()[i]);
    out.push_back(std::move(a));
  }
  return out;
}

template <typename T>
void MarvisModel<T>::load_state_dict(const NamedArrays& state) {
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : state) by_name[a.name] = &a;
  std::string problems;
  for (const auto& e : entries_) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) {
      problems += " missing " + e.name + " " + shape_str(e.tensor.shape()) + ";";
      continue;
    }
    const Shape got(it->second->shape.begin(), it->second->shape.end());
    if (got != e.tensor.shape())
      problems += " " + e.name + " expects " + shape_str(e.tensor.shape()) + ", checkpoint has " +
                  shape_str(got) + ";";
    by_name.erase(it);
  }
  for (const auto& [name, a] : by_name)
    problems += " unexpected " + name + " " +
                shape_str(Shape(a->shape.begin(), a->shape.end())) + ";";
  if (!problems.empty()) throw ShapeError("checkpoint does not match model:" + problems);

  std::map<std::string, const NamedArray*> lookup;
  for (const auto& a : state) lookup[a.name] = &a;
  for (auto& e : entries_) {
    const auto& values = lookup.at(e.name)->values;
    for (std::size_t i = 0; i < values.size(); ++i)
      e.tensor.values()[static_cast<Eigen::Index>(i)] = static_cast<T>(values[i]);
  }
}

std::int64_t count_parameters(const ModelConfig& cfg) {
  return MarvisModel<float>(cfg).parameter_count();
}

template Tensor<float> cbam(const Tensor<float>&, const CbamWeights<float>&);
template Tensor<double> cbam(const Tensor<double>&, const CbamWeights<double>&);
template Tensor<float> tokenized_mlp(const Tensor<float>&, const TokMlpWeights<float>&);
template Tensor<double> tokenized_mlp(const Tensor<double>&, const TokMlpWeights<double>&);
template class MarvisModel<float>;
template class MarvisModel<double>;

}  // namespace marvis
