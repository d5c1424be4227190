#include "marvis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "marvis/errors.hpp"

namespace marvis {

namespace {

template <typename T>
using Arr = typename Tensor<T>::Array;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;
template <typename T>
using Node = TensorNode<T>;

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  if (!x.defined()) throw ShapeError(std::string(op) + ": undefined input");
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

struct Nchw {
  int n, c, h, w;
  Eigen::Index plane() const { return static_cast<Eigen::Index>(h) * w; }
};

template <typename T>
Nchw nchw(const Tensor<T>& x, const char* op) {
  require_rank(x, 4, op);
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  return detail::make_result<T>(a.shape(), a.values() + b.values(), {a, b}, [](Node<T>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = detail::input_grad(self, i)) *g += self.grad;
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  return detail::make_result<T>(a.shape(), a.values() * b.values(), {a, b}, [](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g += self.grad * self.inputs[1]->value;
    if (auto* g = detail::input_grad(self, 1)) *g += self.grad * self.inputs[0]->value;
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::make_result<T>(a.shape(), a.values() * factor, {a}, [factor](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g += self.grad * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Arr<T> v(1);
  v[0] = a.values().sum();
  return detail::make_result<T>(Shape{}, std::move(v), {a}, [](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>(shape, a.values(), {a}, [](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g += self.grad;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::make_result<T>(x.shape(), x.values().max(T(0)), {x}, [](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0))
      *g += (self.inputs[0]->value > T(0)).select(self.grad, T(0));
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Arr<T> y = x.values().unaryExpr([](T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  });
  return detail::make_result<T>(x.shape(), std::move(y), {x}, [](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) *g += self.grad * self.value * (T(1) - self.value);
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Arr<T> y = x.values().unaryExpr(
      [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  return detail::make_result<T>(x.shape(), std::move(y), {x}, [inv_sqrt2](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0)) {
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      *g += self.grad * self.inputs[0]->value.unaryExpr([&](T v) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * std::exp(T(-0.5) * v * v) * inv_sqrt_2pi;
      });
    }
  });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
  int c, h, w, kh, kw, stride, pad, ho, wo;
  Eigen::Index k() const { return static_cast<Eigen::Index>(c) * kh * kw; }
  Eigen::Index p() const { return static_cast<Eigen::Index>(ho) * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, RowMat<T>& cols) {
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        T* row = cols.data() + ((static_cast<Eigen::Index>(c) * g.kh + i) * g.kw + j) * g.p();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          T* out = row + static_cast<Eigen::Index>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* in = x + (static_cast<Eigen::Index>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            out[ox] = (ix >= 0 && ix < g.w) ? in[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const RowMat<T>& cols, const ConvGeom& g, T* gx) {
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const T* row = cols.data() + ((static_cast<Eigen::Index>(c) * g.kh + i) * g.kw + j) * g.p();
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + static_cast<Eigen::Index>(oy) * g.wo;
          T* dst = gx + (static_cast<Eigen::Index>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + j;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

ConvGeom conv_geometry(const Nchw& s, int kh, int kw, int stride, int padding, const char* op) {
  if (stride < 1 || padding < 0)
    throw ShapeError(std::string(op) + ": stride must be >= 1 and padding >= 0");
  const int span_h = s.h + 2 * padding - kh;
  const int span_w = s.w + 2 * padding - kw;
  if (span_h < 0 || span_w < 0)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " does not fit padded input " + std::to_string(s.h) +
                     "x" + std::to_string(s.w));
  return {s.c, s.h, s.w, kh, kw, stride, padding, span_h / stride + 1, span_w / stride + 1};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  const Nchw s = nchw(x, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int f = weight.dim(0);
  if (weight.dim(1) != s.c)
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                     shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{f})
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(f) +
                     " filters");
  const ConvGeom g = conv_geometry(s, weight.dim(2), weight.dim(3), stride, padding, "conv2d");

  const Eigen::Index in_size = static_cast<Eigen::Index>(s.c) * s.plane();
  const Eigen::Index out_size = static_cast<Eigen::Index>(f) * g.p();
  Arr<T> out(static_cast<Eigen::Index>(s.n) * out_size);
  CMapRM<T> wm(weight.values().data(), f, g.k());
  RowMat<T> cols(g.k(), g.p());
  for (int n = 0; n < s.n; ++n) {
    im2col(x.values().data() + n * in_size, g, cols);
    MapRM<T> o(out.data() + n * out_size, f, g.p());
    o.noalias() = wm * cols;
    if (has_bias) o.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.values().data(), f);
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{s.n, f, g.ho, g.wo}, std::move(out), inputs,
      [s, g, f, in_size, out_size, has_bias](Node<T>& self) {
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        auto* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
        CMapRM<T> wm(self.inputs[1]->value.data(), f, g.k());
        RowMat<T> cols(g.k(), g.p());
        for (int n = 0; n < s.n; ++n) {
          CMapRM<T> go(self.grad.data() + n * out_size, f, g.p());
          if (gw) {
            im2col(self.inputs[0]->value.data() + n * in_size, g, cols);
            MapRM<T>(gw->data(), f, g.k()).noalias() += go * cols.transpose();
          }
          if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb->data(), f) += go.rowwise().sum();
          if (gx) {
            cols.noalias() = wm.transpose() * go;
            col2im_add(cols, g, gx->data() + n * in_size);
          }
        }
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding) {
  const Nchw s = nchw(x, "depthwise_conv2d");
  require_rank(weight, 4, "depthwise_conv2d weight");
  if (weight.dim(0) != s.c || weight.dim(1) != 1)
    throw ShapeError("depthwise_conv2d: weight " + shape_str(weight.shape()) + " for input " +
                     shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{s.c})
    throw ShapeError("depthwise_conv2d: bias shape " + shape_str(bias.shape()));
  const ConvGeom g =
      conv_geometry(s, weight.dim(2), weight.dim(3), stride, padding, "depthwise_conv2d");

  // Visits (n, c, oy, ox, iy, ix, tap) for every in-bounds tap.
  auto for_taps = [s, g](auto&& fn) {
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int oy = 0; oy < g.ho; ++oy)
          for (int ox = 0; ox < g.wo; ++ox)
            for (int i = 0; i < g.kh; ++i) {
              const int iy = oy * g.stride - g.pad + i;
              if (iy < 0 || iy >= g.h) continue;
              for (int j = 0; j < g.kw; ++j) {
                const int ix = ox * g.stride - g.pad + j;
                if (ix < 0 || ix >= g.w) continue;
                const Eigen::Index in = ((static_cast<Eigen::Index>(n) * s.c + c) * g.h + iy) * g.w + ix;
                const Eigen::Index out = ((static_cast<Eigen::Index>(n) * s.c + c) * g.ho + oy) * g.wo + ox;
                const Eigen::Index tap = (static_cast<Eigen::Index>(c) * g.kh + i) * g.kw + j;
                fn(in, out, tap);
              }
            }
  };

  Arr<T> out = Arr<T>::Zero(static_cast<Eigen::Index>(s.n) * s.c * g.p());
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  for_taps([&](Eigen::Index in, Eigen::Index o, Eigen::Index tap) { out[o] += wv[tap] * xv[in]; });
  if (has_bias)
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        out.segment((static_cast<Eigen::Index>(n) * s.c + c) * g.p(), g.p()) += bias.values()[c];

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{s.n, s.c, g.ho, g.wo}, std::move(out), inputs,
      [s, g, has_bias, for_taps](Node<T>& self) {
        auto* gx = detail::input_grad(self, 0);
        auto* gw = detail::input_grad(self, 1);
        auto* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
        const T* xv = self.inputs[0]->value.data();
        const T* wv = self.inputs[1]->value.data();
        const T* go = self.grad.data();
        for_taps([&](Eigen::Index in, Eigen::Index o, Eigen::Index tap) {
          if (gx) (*gx)[in] += wv[tap] * go[o];
          if (gw) (*gw)[tap] += xv[in] * go[o];
        });
        if (gb)
          for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
              (*gb)[c] += self.grad.segment((static_cast<Eigen::Index>(n) * s.c + c) * g.p(), g.p()).sum();
      });
}

// ---------------------------------------------------------------- resampling

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  const Nchw s = nchw(x, "maxpool2");
  const int ho = s.h / 2, wo = s.w / 2;
  if (ho < 1 || wo < 1) throw ShapeError("maxpool2: input smaller than 2x2");
  const Eigen::Index count = static_cast<Eigen::Index>(s.n) * s.c * ho * wo;
  Arr<T> out(count);
  std::vector<Eigen::Index> argmax(count);
  const T* xv = x.values().data();
  Eigen::Index o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const Eigen::Index base = nc * s.plane();
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx, ++o) {
        Eigen::Index best = base + static_cast<Eigen::Index>(2 * y) * s.w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const Eigen::Index idx = base + static_cast<Eigen::Index>(2 * y + dy) * s.w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        argmax[o] = best;
        out[o] = xv[best];
      }
  }
  return detail::make_result<T>(Shape{s.n, s.c, ho, wo}, std::move(out), {x},
                                [argmax = std::move(argmax)](Node<T>& self) {
                                  if (auto* g = detail::input_grad(self, 0))
                                    for (std::size_t i = 0; i < argmax.size(); ++i)
                                      (*g)[argmax[i]] += self.grad[static_cast<Eigen::Index>(i)];
                                });
}

namespace {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> t;
};

LerpAxis upsample_axis(int in) {
  LerpAxis a;
  for (int o = 0; o < 2 * in; ++o) {
    const double src = std::max((o + 0.5) / 2.0 - 0.5, 0.0);
    const int lo = std::min(static_cast<int>(src), in - 1);
    a.i0.push_back(lo);
    a.i1.push_back(std::min(lo + 1, in - 1));
    a.t.push_back(src - lo);
  }
  return a;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample2(const Tensor<T>& x) {
  const Nchw s = nchw(x, "bilinear_upsample2");
  const LerpAxis ay = upsample_axis(s.h), ax = upsample_axis(s.w);
  const int ho = 2 * s.h, wo = 2 * s.w;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(ho) * wo;
  Arr<T> out(static_cast<Eigen::Index>(s.n) * s.c * out_plane);
  const T* xv = x.values().data();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* in = xv + nc * s.plane();
    T* dst = out.data() + nc * out_plane;
    for (int y = 0; y < ho; ++y) {
      const T ty = static_cast<T>(ay.t[y]);
      const T* r0 = in + static_cast<Eigen::Index>(ay.i0[y]) * s.w;
      const T* r1 = in + static_cast<Eigen::Index>(ay.i1[y]) * s.w;
      for (int xx = 0; xx < wo; ++xx) {
        const T tx = static_cast<T>(ax.t[xx]);
        const T top = (T(1) - tx) * r0[ax.i0[xx]] + tx * r0[ax.i1[xx]];
        const T bot = (T(1) - tx) * r1[ax.i0[xx]] + tx * r1[ax.i1[xx]];
        dst[static_cast<Eigen::Index>(y) * wo + xx] = (T(1) - ty) * top + ty * bot;
      }
    }
  }
  return detail::make_result<T>(
      Shape{s.n, s.c, ho, wo}, std::move(out), {x}, [s, ay, ax, ho, wo, out_plane](Node<T>& self) {
        auto* g = detail::input_grad(self, 0);
        if (!g) return;
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          T* gin = g->data() + nc * s.plane();
          const T* go = self.grad.data() + nc * out_plane;
          for (int y = 0; y < ho; ++y) {
            const T ty = static_cast<T>(ay.t[y]);
            T* r0 = gin + static_cast<Eigen::Index>(ay.i0[y]) * s.w;
            T* r1 = gin + static_cast<Eigen::Index>(ay.i1[y]) * s.w;
            for (int xx = 0; xx < wo; ++xx) {
              const T tx = static_cast<T>(ax.t[xx]);
              const T v = go[static_cast<Eigen::Index>(y) * wo + xx];
              r0[ax.i0[xx]] += (T(1) - ty) * (T(1) - tx) * v;
              r0[ax.i1[xx]] += (T(1) - ty) * tx * v;
              r1[ax.i0[xx]] += ty * (T(1) - tx) * v;
              r1[ax.i1[xx]] += ty * tx * v;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Nchw first = nchw(xs[0], "concat_channels");
  int total_c = 0;
  std::vector<int> chans;
  for (const auto& t : xs) {
    const Nchw s = nchw(t, "concat_channels");
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("concat_channels: " + shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
    chans.push_back(s.c);
    total_c += s.c;
  }
  const Eigen::Index plane = first.plane();
  Arr<T> out(static_cast<Eigen::Index>(first.n) * total_c * plane);
  for (int n = 0; n < first.n; ++n) {
    Eigen::Index offset = static_cast<Eigen::Index>(n) * total_c * plane;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Eigen::Index len = chans[i] * plane;
      out.segment(offset, len) = xs[i].values().segment(n * len, len);
      offset += len;
    }
  }
  return detail::make_result<T>(Shape{first.n, total_c, first.h, first.w}, std::move(out), xs,
                                [chans, plane, n_batch = first.n, total_c](Node<T>& self) {
                                  for (int n = 0; n < n_batch; ++n) {
                                    Eigen::Index offset = static_cast<Eigen::Index>(n) * total_c * plane;
                                    for (std::size_t i = 0; i < chans.size(); ++i) {
                                      const Eigen::Index len = chans[i] * plane;
                                      if (auto* g = detail::input_grad(self, i))
                                        g->segment(n * len, len) += self.grad.segment(offset, len);
                                      offset += len;
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  const Nchw s = nchw(x, "batch_norm");
  const Shape cshape{s.c};
  if (gamma.shape() != cshape || beta.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape)
    throw ShapeError("batch_norm: parameter shapes must be [" + std::to_string(s.c) + "]");
  const Eigen::Index plane = s.plane();
  const Eigen::Index m = static_cast<Eigen::Index>(s.n) * plane;
  const T* xv = x.values().data();

  auto channel = [&](const T* base, int n, int c) {
    return Eigen::Map<const Arr<T>>(base + (static_cast<Eigen::Index>(n) * s.c + c) * plane, plane);
  };

  Arr<T> mu(s.c), inv_std(s.c);
  if (training) {
    for (int c = 0; c < s.c; ++c) {
      T acc = 0;
      for (int n = 0; n < s.n; ++n) acc += channel(xv, n, c).sum();
      const T mc = acc / static_cast<T>(m);
      T var = 0;
      for (int n = 0; n < s.n; ++n) var += (channel(xv, n, c) - mc).square().sum();
      var /= static_cast<T>(m);
      mu[c] = mc;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean.values()[c] = (T(1) - momentum) * running_mean.values()[c] + momentum * mc;
      running_var.values()[c] = (T(1) - momentum) * running_var.values()[c] + momentum * unbiased;
    }
  } else {
    mu = running_mean.values();
    inv_std = (running_var.values() + eps).rsqrt();
  }

  Arr<T> xhat(x.numel());
  Arr<T> out(x.numel());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const Eigen::Index off = (static_cast<Eigen::Index>(n) * s.c + c) * plane;
      xhat.segment(off, plane) = (channel(xv, n, c) - mu[c]) * inv_std[c];
      out.segment(off, plane) = xhat.segment(off, plane) * gamma.values()[c] + beta.values()[c];
    }

  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [s, plane, m, training, inv_std, xhat = std::move(xhat)](Node<T>& self) {
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gb = detail::input_grad(self, 2);
        const Arr<T>& gamma = self.inputs[1]->value;
        for (int c = 0; c < s.c; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int n = 0; n < s.n; ++n) {
            const Eigen::Index off = (static_cast<Eigen::Index>(n) * s.c + c) * plane;
            sum_dy += self.grad.segment(off, plane).sum();
            sum_dy_xhat += (self.grad.segment(off, plane) * xhat.segment(off, plane)).sum();
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (!gx) continue;
          const T k = gamma[c] * inv_std[c];
          for (int n = 0; n < s.n; ++n) {
            const Eigen::Index off = (static_cast<Eigen::Index>(n) * s.c + c) * plane;
            if (training) {
              gx->segment(off, plane) +=
                  k / static_cast<T>(m) *
                  (static_cast<T>(m) * self.grad.segment(off, plane) - sum_dy -
                   xhat.segment(off, plane) * sum_dy_xhat);
            } else {
              gx->segment(off, plane) += k * self.grad.segment(off, plane);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!x.defined() || x.rank() < 1) throw ShapeError("layer_norm: input needs rank >= 1");
  const int e = x.dim(-1);
  if (e == 0) throw ShapeError("layer_norm: last dimension is zero");
  if (gamma.shape() != Shape{e} || beta.shape() != Shape{e})
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(e) + "]");
  const Eigen::Index positions = x.numel() / e;
  CMapRM<T> xm(x.values().data(), positions, e);
  Arr<T> xhat_store(x.numel()), out(x.numel());
  Arr<T> inv_std(positions);
  MapRM<T> xhat(xhat_store.data(), positions, e);
  MapRM<T> om(out.data(), positions, e);
  for (Eigen::Index p = 0; p < positions; ++p) {
    const T mu = xm.row(p).mean();
    const T var = (xm.row(p).array() - mu).square().mean();
    inv_std[p] = T(1) / std::sqrt(var + eps);
    xhat.row(p) = (xm.row(p).array() - mu) * inv_std[p];
    om.row(p) = xhat.row(p).array() * gamma.values().transpose() + beta.values().transpose();
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [positions, e, inv_std, xhat_store = std::move(xhat_store)](Node<T>& self) {
        auto* gx = detail::input_grad(self, 0);
        auto* gg = detail::input_grad(self, 1);
        auto* gb = detail::input_grad(self, 2);
        CMapRM<T> dy(self.grad.data(), positions, e);
        CMapRM<T> xhat(xhat_store.data(), positions, e);
        if (gg) *gg += (dy.array() * xhat.array()).colwise().sum().transpose();
        if (gb) *gb += dy.array().colwise().sum().transpose();
        if (!gx) return;
        MapRM<T> dx(gx->data(), positions, e);
        const auto gamma = self.inputs[1]->value.transpose();
        for (Eigen::Index p = 0; p < positions; ++p) {
          const Eigen::Array<T, 1, Eigen::Dynamic> dxhat = dy.row(p).array() * gamma;
          const T s1 = dxhat.sum();
          const T s2 = (dxhat * xhat.row(p).array()).sum();
          dx.row(p).array() +=
              inv_std[p] / static_cast<T>(e) *
              (static_cast<T>(e) * dxhat - s1 - xhat.row(p).array() * s2);
        }
      });
}

// ---------------------------------------------------------------- tokens / MLP

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (!x.defined() || x.rank() < 1) throw ShapeError("linear: input needs rank >= 1");
  require_rank(weight, 2, "linear weight");
  const int in = x.dim(-1), out_f = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " for input " +
                     shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out_f}) throw ShapeError("linear: bias shape mismatch");
  const Eigen::Index rows = x.numel() / std::max(in, 1);
  Shape oshape = x.shape();
  oshape.back() = out_f;
  Arr<T> out(rows * out_f);
  MapRM<T> om(out.data(), rows, out_f);
  CMapRM<T> xm(x.values().data(), rows, in);
  CMapRM<T> wm(weight.values().data(), out_f, in);
  om.noalias() = xm * wm.transpose();
  if (has_bias) om.rowwise() += bias.values().matrix().transpose();
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(oshape, std::move(out), inputs,
                                [rows, in, out_f, has_bias](Node<T>& self) {
                                  CMapRM<T> dy(self.grad.data(), rows, out_f);
                                  CMapRM<T> wm(self.inputs[1]->value.data(), out_f, in);
                                  CMapRM<T> xm(self.inputs[0]->value.data(), rows, in);
                                  if (auto* g = detail::input_grad(self, 0))
                                    MapRM<T>(g->data(), rows, in).noalias() += dy * wm;
                                  if (auto* g = detail::input_grad(self, 1))
                                    MapRM<T>(g->data(), out_f, in).noalias() += dy.transpose() * xm;
                                  if (has_bias)
                                    if (auto* g = detail::input_grad(self, 2))
                                      *g += dy.colwise().sum().transpose().array();
                                });
}

template <typename T>
Tensor<T> axial_shift(const Tensor<T>& x, ShiftAxis axis, const std::vector<int>& offsets) {
  const Nchw s = nchw(x, "axial_shift");
  const int groups = static_cast<int>(offsets.size());
  if (groups < 1 || s.c % groups != 0)
    throw ShapeError("axial_shift: " + std::to_string(s.c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  const int per = s.c / groups;
  // out(y, x) = in(y - dy, x - dx) with zero fill.
  auto visit = [s, per, axis, offsets](auto&& fn) {
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const int off = offsets[c / per];
        const int dx = axis == ShiftAxis::kWidth ? off : 0;
        const int dy = axis == ShiftAxis::kHeight ? off : 0;
        const Eigen::Index base = (static_cast<Eigen::Index>(n) * s.c + c) * s.plane();
        for (int y = 0; y < s.h; ++y) {
          const int sy = y - dy;
          if (sy < 0 || sy >= s.h) continue;
          for (int xx = 0; xx < s.w; ++xx) {
            const int sx = xx - dx;
            if (sx < 0 || sx >= s.w) continue;
            fn(base + static_cast<Eigen::Index>(y) * s.w + xx,
               base + static_cast<Eigen::Index>(sy) * s.w + sx);
          }
        }
      }
  };
  Arr<T> out = Arr<T>::Zero(x.numel());
  const T* xv = x.values().data();
  visit([&](Eigen::Index o, Eigen::Index i) { out[o] = xv[i]; });
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [visit](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0))
      visit([&](Eigen::Index o, Eigen::Index i) { (*g)[i] += self.grad[o]; });
  });
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const Nchw s = nchw(x, "to_tokens");
  const Eigen::Index p = s.plane();
  Arr<T> out(x.numel());
  for (int n = 0; n < s.n; ++n)
    MapRM<T>(out.data() + n * p * s.c, p, s.c) =
        CMapRM<T>(x.values().data() + n * p * s.c, s.c, p).transpose();
  return detail::make_result<T>(Shape{s.n, static_cast<int>(p), s.c}, std::move(out), {x},
                                [s, p](Node<T>& self) {
                                  if (auto* g = detail::input_grad(self, 0))
                                    for (int n = 0; n < s.n; ++n)
                                      MapRM<T>(g->data() + n * p * s.c, s.c, p) +=
                                          CMapRM<T>(self.grad.data() + n * p * s.c, p, s.c).transpose();
                                });
}

template <typename T>
Tensor<T> detokenize(const Tensor<T>& tokens, int height, int width) {
  require_rank(tokens, 3, "detokenize");
  const int n_batch = tokens.dim(0), count = tokens.dim(1), c = tokens.dim(2);
  if (static_cast<std::int64_t>(height) * width != count)
    throw ShapeError("detokenize: " + std::to_string(count) + " tokens cannot form " +
                     std::to_string(height) + "x" + std::to_string(width));
  const Eigen::Index p = count;
  Arr<T> out(tokens.numel());
  for (int n = 0; n < n_batch; ++n)
    MapRM<T>(out.data() + n * p * c, c, p) =
        CMapRM<T>(tokens.values().data() + n * p * c, p, c).transpose();
  return detail::make_result<T>(Shape{n_batch, c, height, width}, std::move(out), {tokens},
                                [n_batch, p, c](Node<T>& self) {
                                  if (auto* g = detail::input_grad(self, 0))
                                    for (int n = 0; n < n_batch; ++n)
                                      MapRM<T>(g->data() + n * p * c, p, c) +=
                                          CMapRM<T>(self.grad.data() + n * p * c, c, p).transpose();
                                });
}

template <typename T>
Tensor<T> tokenize(const Tensor<T>& x, const Tensor<T>& proj_weight, const Tensor<T>& proj_bias) {
  require_rank(proj_weight, 4, "tokenize projection");
  if (proj_weight.dim(2) != 3 || proj_weight.dim(3) != 3)
    throw ShapeError("tokenize: projection must be 3x3, got " + shape_str(proj_weight.shape()));
  return to_tokens(conv2d(x, proj_weight, proj_bias, 1, 1));
}

// ---------------------------------------------------------------- attention helpers

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Nchw s = nchw(x, "global_avg_pool");
  const Eigen::Index p = s.plane();
  Arr<T> out(static_cast<Eigen::Index>(s.n) * s.c);
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = x.values().segment(i * p, p).mean();
  return detail::make_result<T>(Shape{s.n, s.c}, std::move(out), {x}, [p](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0))
      for (Eigen::Index i = 0; i < self.grad.size(); ++i)
        g->segment(i * p, p) += self.grad[i] / static_cast<T>(p);
  });
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  const Nchw s = nchw(x, "global_max_pool");
  const Eigen::Index p = s.plane();
  Arr<T> out(static_cast<Eigen::Index>(s.n) * s.c);
  std::vector<Eigen::Index> argmax(out.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    Eigen::Index k = 0;
    out[i] = x.values().segment(i * p, p).maxCoeff(&k);
    argmax[i] = i * p + k;
  }
  return detail::make_result<T>(Shape{s.n, s.c}, std::move(out), {x},
                                [argmax = std::move(argmax)](Node<T>& self) {
                                  if (auto* g = detail::input_grad(self, 0))
                                    for (std::size_t i = 0; i < argmax.size(); ++i)
                                      (*g)[argmax[i]] += self.grad[static_cast<Eigen::Index>(i)];
                                });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Nchw s = nchw(x, "channel_mean");
  const Eigen::Index p = s.plane();
  Arr<T> out = Arr<T>::Zero(static_cast<Eigen::Index>(s.n) * p);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      out.segment(n * p, p) += x.values().segment((static_cast<Eigen::Index>(n) * s.c + c) * p, p);
  out /= static_cast<T>(s.c);
  return detail::make_result<T>(Shape{s.n, 1, s.h, s.w}, std::move(out), {x}, [s, p](Node<T>& self) {
    if (auto* g = detail::input_grad(self, 0))
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          g->segment((static_cast<Eigen::Index>(n) * s.c + c) * p, p) +=
              self.grad.segment(n * p, p) / static_cast<T>(s.c);
  });
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  const Nchw s = nchw(x, "channel_max");
  const Eigen::Index p = s.plane();
  Arr<T> out(static_cast<Eigen::Index>(s.n) * p);
  std::vector<Eigen::Index> argmax(out.size());
  const T* xv = x.values().data();
  for (int n = 0; n < s.n; ++n)
    for (Eigen::Index i = 0; i < p; ++i) {
      Eigen::Index best = static_cast<Eigen::Index>(n) * s.c * p + i;
      for (int c = 1; c < s.c; ++c) {
        const Eigen::Index idx = (static_cast<Eigen::Index>(n) * s.c + c) * p + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      argmax[n * p + i] = best;
      out[n * p + i] = xv[best];
    }
  return detail::make_result<T>(Shape{s.n, 1, s.h, s.w}, std::move(out), {x},
                                [argmax = std::move(argmax)](Node<T>& self) {
                                  if (auto* g = detail::input_grad(self, 0))
                                    for (std::size_t i = 0; i < argmax.size(); ++i)
                                      (*g)[argmax[i]] += self.grad[static_cast<Eigen::Index>(i)];
                                });
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s_in) {
  const Nchw s = nchw(x, "scale_channels");
  if (s_in.shape() != Shape{s.n, s.c})
    throw ShapeError("scale_channels: scale " + shape_str(s_in.shape()) + " for " + shape_str(x.shape()));
  const Eigen::Index p = s.plane();
  Arr<T> out(x.numel());
  for (Eigen::Index i = 0; i < s_in.numel(); ++i)
    out.segment(i * p, p) = x.values().segment(i * p, p) * s_in.values()[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x, s_in}, [p](Node<T>& self) {
    auto* gx = detail::input_grad(self, 0);
    auto* gs = detail::input_grad(self, 1);
    const Arr<T>& xv = self.inputs[0]->value;
    const Arr<T>& sv = self.inputs[1]->value;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
      if (gx) gx->segment(i * p, p) += self.grad.segment(i * p, p) * sv[i];
      if (gs) (*gs)[i] += (self.grad.segment(i * p, p) * xv.segment(i * p, p)).sum();
    }
  });
}

template <typename T>
Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& s_in) {
  const Nchw s = nchw(x, "scale_spatial");
  if (s_in.shape() != Shape{s.n, 1, s.h, s.w})
    throw ShapeError("scale_spatial: scale " + shape_str(s_in.shape()) + " for " + shape_str(x.shape()));
  const Eigen::Index p = s.plane();
  Arr<T> out(x.numel());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const Eigen::Index off = (static_cast<Eigen::Index>(n) * s.c + c) * p;
      out.segment(off, p) = x.values().segment(off, p) * s_in.values().segment(n * p, p);
    }
  return detail::make_result<T>(x.shape(), std::move(out), {x, s_in}, [s, p](Node<T>& self) {
    auto* gx = detail::input_grad(self, 0);
    auto* gs = detail::input_grad(self, 1);
    const Arr<T>& xv = self.inputs[0]->value;
    const Arr<T>& sv = self.inputs[1]->value;
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const Eigen::Index off = (static_cast<Eigen::Index>(n) * s.c + c) * p;
        if (gx) gx->segment(off, p) += self.grad.segment(off, p) * sv.segment(n * p, p);
        if (gs) gs->segment(n * p, p) += self.grad.segment(off, p) * xv.segment(off, p);
      }
  });
}

#define MARVIS_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);   \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      int, int);                                               \
  template Tensor<T> maxpool2(const Tensor<T>&);                                               \
  template Tensor<T> bilinear_upsample2(const Tensor<T>&);                                     \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                Tensor<T>&, Tensor<T>&, bool, T, T);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> axial_shift(const Tensor<T>&, ShiftAxis, const std::vector<int>&);        \
  template Tensor<T> to_tokens(const Tensor<T>&);                                              \
  template Tensor<T> detokenize(const Tensor<T>&, int, int);                                   \
  template Tensor<T> tokenize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
  template Tensor<T> global_max_pool(const Tensor<T>&);                                        \
  template Tensor<T> channel_mean(const Tensor<T>&);                                           \
  template Tensor<T> channel_max(const Tensor<T>&);                                            \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> scale_spatial(const Tensor<T>&, const Tensor<T>&);

MARVIS_INSTANTIATE_OPS(float)
MARVIS_INSTANTIATE_OPS(double)

}  // namespace marvis
