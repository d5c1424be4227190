#pragma once

#include <vector>

#include "marvis/tensor.hpp"

namespace marvis {

// Differentiable operations. Image tensors are NCHW; every op either returns
// the documented shape or throws ShapeError. The only broadcasting is the
// bias add inside conv2d / depthwise_conv2d / linear and the explicit
// scale_channels / scale_spatial ops.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
/// Exact GELU, x * Phi(x) with Phi from erf.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// Cross-correlation. x [N,C,H,W], weight [F,C,kh,kw], bias [F] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding);

/// Per-channel filtering. weight [C,1,kh,kw], bias [C] or undefined.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding);

/// 2x2 max pooling with stride 2 (floor on odd sizes).
template <typename T> Tensor<T> maxpool2(const Tensor<T>& x);

/// Bilinear x2 upsampling with half-pixel centers (align_corners = false).
template <typename T> Tensor<T> bilinear_upsample2(const Tensor<T>& x);

/// Concatenation along the channel axis of NCHW tensors.
template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

/// Training mode normalizes with batch statistics over (N,H,W) and updates
/// the running buffers in place (unbiased variance); eval mode uses them.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

/// Normalization over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// x [..., in], weight [out, in], bias [out] or undefined -> [..., out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

enum class ShiftAxis { kWidth, kHeight };

/// Channels split into offsets.size() contiguous equal groups; group g is
/// translated along `axis` by offsets[g] pixels with zero fill.
template <typename T>
Tensor<T> axial_shift(const Tensor<T>& x, ShiftAxis axis, const std::vector<int>& offsets);

/// [N,C,H,W] -> [N,H*W,C].
template <typename T> Tensor<T> to_tokens(const Tensor<T>& x);
/// [N,H*W,C] -> [N,C,H,W]; exact inverse of to_tokens.
template <typename T> Tensor<T> detokenize(const Tensor<T>& tokens, int height, int width);
/// 3x3 stride-1 pad-1 projection to E channels followed by to_tokens.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& x, const Tensor<T>& proj_weight, const Tensor<T>& proj_bias);

/// [N,C,H,W] -> [N,C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T> Tensor<T> global_max_pool(const Tensor<T>& x);
/// [N,C,H,W] -> [N,1,H,W]
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T> Tensor<T> channel_max(const Tensor<T>& x);
/// x [N,C,H,W] times s [N,C] per channel.
template <typename T> Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);
/// x [N,C,H,W] times s [N,1,H,W] per position.
template <typename T> Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& s);

}  // namespace marvis
