#pragma once

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "dudo/autodiff.hpp"
#include "dudo/fourier.hpp"

namespace dudo {

namespace detail {

template <class T>
inline void accumulate(T* __restrict dst, const T* __restrict src, std::ptrdiff_t n) {
  for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <class T>
inline void axpy(T* __restrict dst, T a, const T* __restrict src, std::ptrdiff_t n) {
  for (std::ptrdiff_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

template <class T>
inline T dot(const T* a, const T* b, std::ptrdiff_t n) {
  return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(a, n).dot(
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b, n));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

inline void require_rank4(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected rank-4 (batch, channel, h, w) input, got " + shape_string(s));
}

/// Zero-padded plane layout used by the dense convolution kernels.
struct PaddedGeometry {
  std::size_t h, w, k, dil, margin, hp, wp;

  PaddedGeometry(std::size_t h_, std::size_t w_, std::size_t k_, std::size_t dil_)
      : h(h_), w(w_), k(k_), dil(dil_), margin((k_ / 2) * dil_), hp(h_ + 2 * margin), wp(w_ + 2 * margin) {}

  std::size_t plane() const { return hp * wp; }
  std::size_t wide_cols() const { return h * wp; }
  // The last tap window runs 2*margin past the final plane.
  std::size_t buffer_size(std::size_t channels) const { return channels * plane() + 2 * margin; }
  std::size_t offset(std::size_t tap) const { return (tap / k) * dil * wp + (tap % k) * dil; }

  template <class T>
  void pad(const T* src, std::size_t channels, T* dst) const {
    std::fill(dst, dst + buffer_size(channels), T(0));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy(src + (c * h + y) * w, src + (c * h + y + 1) * w, dst + c * plane() + (y + margin) * wp + margin);
  }

  template <class T>
  void unpad_accumulate(const T* src, std::size_t channels, T* dst) const {
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        accumulate(dst + (c * h + y) * w, src + c * plane() + (y + margin) * wp + margin, static_cast<std::ptrdiff_t>(w));
  }

  template <class T>
  void crop(const T* wide, std::size_t channels, T* dst) const {
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy(wide + c * wide_cols() + y * wp, wide + c * wide_cols() + y * wp + w, dst + (c * h + y) * w);
  }

  template <class T>
  void widen(const T* src, std::size_t channels, T* wide) const {
    std::fill(wide, wide + channels * wide_cols(), T(0));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy(src + (c * h + y) * w, src + (c * h + y + 1) * w, wide + c * wide_cols() + y * wp);
  }

  template <class T>
  auto window(const T* padded, std::size_t channels, std::size_t tap) const {
    using Map = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
    return Map(padded + offset(tap), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(wide_cols()),
               Eigen::OuterStride<>(static_cast<Eigen::Index>(plane())));
  }

  template <class T>
  auto window_mut(T* padded, std::size_t channels, std::size_t tap) const {
    using Map = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
    return Map(padded + offset(tap), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(wide_cols()),
               Eigen::OuterStride<>(static_cast<Eigen::Index>(plane())));
  }
};

using TapStride = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;

/// (cout, cin) slice of a (cout, cin, k, k) weight for one kernel tap.
template <class T>
auto tap_weights(const T* w, std::size_t cout, std::size_t cin, std::size_t k, std::size_t tap) {
  return Eigen::Map<const RowMat<T>, 0, TapStride>(
      w + tap, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin),
      TapStride(static_cast<Eigen::Index>(cin * k * k), static_cast<Eigen::Index>(k * k)));
}

template <class T>
auto tap_weights_mut(T* w, std::size_t cout, std::size_t cin, std::size_t k, std::size_t tap) {
  return Eigen::Map<RowMat<T>, 0, TapStride>(
      w + tap, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin),
      TapStride(static_cast<Eigen::Index>(cin * k * k), static_cast<Eigen::Index>(k * k)));
}

/// Per-channel k x k correlation with zero padding; one filter per channel.
template <class T>
void depthwise_forward(const T* x, const T* wgt, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                       std::size_t dil, T* out) {
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * h * w;
    T* o = out + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t dy = (static_cast<std::ptrdiff_t>(ky) - half) * static_cast<std::ptrdiff_t>(dil);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dx = (static_cast<std::ptrdiff_t>(kx) - half) * static_cast<std::ptrdiff_t>(dil);
        const T wv = wgt[(c * k + ky) * k + kx];
        const std::ptrdiff_t x0 = std::clamp<std::ptrdiff_t>(-dx, 0, W), x1 = std::clamp<std::ptrdiff_t>(W - dx, 0, W);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t iy = y + dy;
          if (iy < 0 || iy >= H) continue;
          if (x0 < x1) axpy(o + y * W + x0, wv, plane + iy * W + dx + x0, x1 - x0);
        }
      }
    }
  }
}

template <class T>
void depthwise_backward(const T* x, const T* wgt, const T* gout, std::size_t channels, std::size_t h, std::size_t w,
                        std::size_t k, std::size_t dil, T* gx, T* gw) {
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * h * w;
    const T* g = gout + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      const std::ptrdiff_t dy = (static_cast<std::ptrdiff_t>(ky) - half) * static_cast<std::ptrdiff_t>(dil);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::ptrdiff_t dx = (static_cast<std::ptrdiff_t>(kx) - half) * static_cast<std::ptrdiff_t>(dil);
        const std::size_t widx = (c * k + ky) * k + kx;
        const T wv = wgt[widx];
        const std::ptrdiff_t x0 = std::clamp<std::ptrdiff_t>(-dx, 0, W), x1 = std::clamp<std::ptrdiff_t>(W - dx, 0, W);
        T acc = 0;
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t iy = y + dy;
          if (iy < 0 || iy >= H) continue;
          if (x0 >= x1) continue;
          const T* grow = g + y * W + x0;
          if (gx) axpy(gx + c * h * w + iy * W + dx + x0, wv, grow, x1 - x0);
          if (gw) acc += dot(plane + iy * W + dx + x0, grow, x1 - x0);
        }
        if (gw) gw[widx] += acc;
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with "same" zero padding of (kernel-1)*dilation/2 per side.
/// weight: (out_channels, in_channels/groups, k, k); bias: (out_channels) or empty.
///
/// Dense kernels run one GEMM per tap: with the input zero-padded to width Wp, the tap (ky, kx)
/// contribution to output row-major index y*Wp + x reads a contiguous window of the padded planes
/// starting at ky*dil*Wp + kx*dil. Columns x >= W of that wide output are discarded.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t dilation = 1,
              std::size_t groups = 1) {
  using namespace detail;
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require_rank4(xs, "conv2d");
  require(ws.size() == 4 && ws[2] == ws[3], "conv2d: weight must be (out, in/groups, k, k), got " + shape_string(ws));
  require(ws[2] % 2 == 1, "conv2d: kernel size must be odd");
  require(groups >= 1 && xs[1] % groups == 0 && ws[0] % groups == 0, "conv2d: channels not divisible by groups");
  require(ws[1] * groups == xs[1], "conv2d: weight expects " + std::to_string(ws[1] * groups) +
                                       " input channels, input has " + std::to_string(xs[1]));
  require(dilation >= 1, "conv2d: dilation must be >= 1");
  if (bias) require(bias.shape() == Shape{ws[0]}, "conv2d: bias must have shape [out_channels]");

  const std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3], N = H * W;
  const std::size_t Cout = ws[0], k = ws[2], cin_g = Cin / groups, cout_g = Cout / groups;
  const bool depthwise = groups == Cin && Cout == Cin;
  const PaddedGeometry geo(H, W, k, dilation);

  Tensor<T> out({B, Cout, H, W});
  const T* xd = x.value().data().data();
  const T* wd = weight.value().data().data();
  T* od = out.data().data();
  if (depthwise) {
    for (std::size_t b = 0; b < B; ++b) depthwise_forward(xd + b * Cin * N, wd, Cin, H, W, k, dilation, od + b * Cout * N);
  } else if (k == 1) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t g = 0; g < groups; ++g)
        MapMat<T>(od + (b * Cout + g * cout_g) * N, cout_g, N).noalias() =
            CMapMat<T>(wd + g * cout_g * cin_g, cout_g, cin_g) * CMapMat<T>(xd + (b * Cin + g * cin_g) * N, cin_g, N);
  } else {
    AlignedVector<T> padded(geo.buffer_size(cin_g)), wide(cout_g * geo.wide_cols());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t g = 0; g < groups; ++g) {
        geo.pad(xd + (b * Cin + g * cin_g) * N, cin_g, padded.data());
        MapMat<T> acc(wide.data(), cout_g, geo.wide_cols());
        acc.setZero();
        for (std::size_t t = 0; t < k * k; ++t)
          acc.noalias() += tap_weights(wd + g * cout_g * cin_g * k * k, cout_g, cin_g, k, t) *
                           geo.window(padded.data(), cin_g, t);
        geo.crop(wide.data(), cout_g, od + (b * Cout + g * cout_g) * N);
      }
  }
  FlopCounter::add(2ull * B * Cout * cin_g * k * k * N);
  if (bias) {
    const T* bd = bias.value().data().data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < Cout; ++c) {
        T* p = od + (b * Cout + c) * N;
        for (std::size_t i = 0; i < N; ++i) p[i] += bd[c];
      }
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_result<T>(
      "conv2d", std::move(out), std::move(parents),
      [=](Node<T>& n) {
        Node<T>& px = *n.parents[0];
        Node<T>& pw = *n.parents[1];
        const T* g = n.grad.data().data();
        const T* xv = px.value.data().data();
        const T* wv = pw.value.data().data();
        T* gx = px.requires_grad ? px.grad_buffer().data().data() : nullptr;
        T* gw = pw.requires_grad ? pw.grad_buffer().data().data() : nullptr;
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
          T* gb = n.parents[2]->grad_buffer().data().data();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < Cout; ++c) {
              const T* p = g + (b * Cout + c) * N;
              T acc = 0;
              for (std::size_t i = 0; i < N; ++i) acc += p[i];
              gb[c] += acc;
            }
        }
        FlopCounter::add(4ull * B * Cout * cin_g * k * k * N);
        if (depthwise) {
          for (std::size_t b = 0; b < B; ++b)
            depthwise_backward(xv + b * Cin * N, wv, g + b * Cout * N, Cin, H, W, k, dilation,
                               gx ? gx + b * Cin * N : nullptr, gw);
          return;
        }
        if (k == 1) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t g_ = 0; g_ < groups; ++g_) {
              CMapMat<T> go(g + (b * Cout + g_ * cout_g) * N, cout_g, N);
              CMapMat<T> xin(xv + (b * Cin + g_ * cin_g) * N, cin_g, N);
              if (gw) MapMat<T>(gw + g_ * cout_g * cin_g, cout_g, cin_g).noalias() += go * xin.transpose();
              if (gx)
                MapMat<T>(gx + (b * Cin + g_ * cin_g) * N, cin_g, N).noalias() +=
                    CMapMat<T>(wv + g_ * cout_g * cin_g, cout_g, cin_g).transpose() * go;
            }
          return;
        }
        AlignedVector<T> padded(geo.buffer_size(cin_g)), gpadded(gx ? geo.buffer_size(cin_g) : 0),
            gwide(cout_g * geo.wide_cols());
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t g_ = 0; g_ < groups; ++g_) {
            geo.widen(g + (b * Cout + g_ * cout_g) * N, cout_g, gwide.data());
            CMapMat<T> go(gwide.data(), cout_g, geo.wide_cols());
            if (gw) geo.pad(xv + (b * Cin + g_ * cin_g) * N, cin_g, padded.data());
            if (gx) std::fill(gpadded.begin(), gpadded.end(), T(0));
            for (std::size_t t = 0; t < k * k; ++t) {
              if (gw) {
                tap_weights_mut(gw + g_ * cout_g * cin_g * k * k, cout_g, cin_g, k, t).noalias() +=
                    go * geo.window(padded.data(), cin_g, t).transpose();
              }
              if (gx) {
                geo.window_mut(gpadded.data(), cin_g, t).noalias() +=
                    tap_weights(wv + g_ * cout_g * cin_g * k * k, cout_g, cin_g, k, t).transpose() * go;
              }
            }
            if (gx) geo.unpad_accumulate(gpadded.data(), cin_g, gx + (b * Cin + g_ * cin_g) * N);
          }
      });
}

/// conv2d with one k x k filter per channel (groups = channels).
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t dilation = 1) {
  return conv2d(x, weight, bias, dilation, x.shape().at(1));
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return make_result<T>("relu", std::move(out), {x}, [](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i)
      if (p.value[i] > T(0)) gp[i] += n.grad[i];
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v / (T(1) + std::exp(-v));
  return make_result<T>("silu", std::move(out), {x}, [](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T v = p.value[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      gp[i] += n.grad[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      auto& gp = p->grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return make_result<T>("scale", std::move(out), {a}, [s](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += s * n.grad[i];
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {x}, [](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += n.grad[i];
  });
}

/// Concatenates rank-4 tensors along the channel axis.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  detail::require_rank4(s0, "concat_channels");
  std::size_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                    "concat_channels: incompatible shape " + shape_string(s));
    total += s[1];
  }
  const std::size_t B = s0[0], N = s0[2] * s0[3];
  Tensor<T> out({B, total, s0[2], s0[3]});
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t c = x.shape()[1];
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = x.value().data().data() + b * c * N;
      std::copy(src, src + c * N, out.data().data() + (b * total + offset) * N);
    }
    offset += c;
  }
  return make_result<T>("concat_channels", std::move(out), xs, [B, N, total](Node<T>& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      const std::size_t c = p->value.shape()[1];
      if (p->requires_grad) {
        auto& gp = p->grad_buffer();
        for (std::size_t b = 0; b < B; ++b) {
          const T* src = n.grad.data().data() + (b * total + off) * N;
          T* dst = gp.data().data() + b * c * N;
          for (std::size_t i = 0; i < c * N; ++i) dst[i] += src[i];
        }
      }
      off += c;
    }
  });
}

/// Channels [start, start+count) of a rank-4 tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  detail::require_rank4(s, "slice_channels");
  detail::require(start + count <= s[1], "slice_channels: range out of bounds");
  const std::size_t B = s[0], C = s[1], N = s[2] * s[3];
  Tensor<T> out({B, count, s[2], s[3]});
  for (std::size_t b = 0; b < B; ++b) {
    const T* src = x.value().data().data() + (b * C + start) * N;
    std::copy(src, src + count * N, out.data().data() + b * count * N);
  }
  return make_result<T>("slice_channels", std::move(out), {x}, [=](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b) {
      const T* src = n.grad.data().data() + b * count * N;
      T* dst = gp.data().data() + (b * C + start) * N;
      for (std::size_t i = 0; i < count * N; ++i) dst[i] += src[i];
    }
  });
}

/// Batched a * b^T: a (G, M, K), b (G, P, K) -> (G, M, P).
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  using namespace detail;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[2],
          "matmul_nt: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  const std::size_t G = as[0], M = as[1], K = as[2], P = bs[1];
  Tensor<T> out({G, M, P});
  for (std::size_t g = 0; g < G; ++g) {
    MapMat<T>(out.data().data() + g * M * P, M, P).noalias() =
        CMapMat<T>(a.value().data().data() + g * M * K, M, K) *
        CMapMat<T>(b.value().data().data() + g * P * K, P, K).transpose();
  }
  FlopCounter::add(2ull * G * M * P * K);
  return make_result<T>("matmul_nt", std::move(out), {a, b}, [=](Node<T>& n) {
    Node<T>& pa = *n.parents[0];
    Node<T>& pb = *n.parents[1];
    for (std::size_t g = 0; g < G; ++g) {
      CMapMat<T> go(n.grad.data().data() + g * M * P, M, P);
      if (pa.requires_grad)
        MapMat<T>(pa.grad_buffer().data().data() + g * M * K, M, K).noalias() +=
            go * CMapMat<T>(pb.value.data().data() + g * P * K, P, K);
      if (pb.requires_grad)
        MapMat<T>(pb.grad_buffer().data().data() + g * P * K, P, K).noalias() +=
            go.transpose() * CMapMat<T>(pa.value.data().data() + g * M * K, M, K);
    }
    FlopCounter::add(4ull * G * M * P * K);
  });
}

/// Batched a * b: a (G, M, K), b (G, K, N) -> (G, M, N).
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  using namespace detail;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1],
          "matmul: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  const std::size_t G = as[0], M = as[1], K = as[2], N = bs[2];
  Tensor<T> out({G, M, N});
  for (std::size_t g = 0; g < G; ++g) {
    MapMat<T>(out.data().data() + g * M * N, M, N).noalias() =
        CMapMat<T>(a.value().data().data() + g * M * K, M, K) * CMapMat<T>(b.value().data().data() + g * K * N, K, N);
  }
  FlopCounter::add(2ull * G * M * N * K);
  return make_result<T>("matmul", std::move(out), {a, b}, [=](Node<T>& n) {
    Node<T>& pa = *n.parents[0];
    Node<T>& pb = *n.parents[1];
    for (std::size_t g = 0; g < G; ++g) {
      CMapMat<T> go(n.grad.data().data() + g * M * N, M, N);
      if (pa.requires_grad)
        MapMat<T>(pa.grad_buffer().data().data() + g * M * K, M, K).noalias() +=
            go * CMapMat<T>(pb.value.data().data() + g * K * N, K, N).transpose();
      if (pb.requires_grad)
        MapMat<T>(pb.grad_buffer().data().data() + g * K * N, K, N).noalias() +=
            CMapMat<T>(pa.value.data().data() + g * M * K, M, K).transpose() * go;
    }
    FlopCounter::add(4ull * G * M * N * K);
  });
}

/// Numerically stable softmax along `axis`.
template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  detail::require(axis < s.size(), "softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t L = s[axis];
  Tensor<T> out(s);
  const T* xv = x.value().data().data();
  T* ov = out.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * L * inner + in;
      T mx = xv[base];
      for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, xv[base + l * inner]);
      T sum = 0;
      for (std::size_t l = 0; l < L; ++l) {
        const T e = std::exp(xv[base + l * inner] - mx);
        ov[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < L; ++l) ov[base + l * inner] /= sum;
    }
  return make_result<T>("softmax", std::move(out), {x}, [=](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    const T* y = n.value.data().data();
    const T* g = n.grad.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * L * inner + in;
        T dot = 0;
        for (std::size_t l = 0; l < L; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (std::size_t l = 0; l < L; ++l)
          gp[base + l * inner] += y[base + l * inner] * (g[base + l * inner] - dot);
      }
  });
}

/// Non-overlapping win x win spatial windows, each flattened to a win^2 vector and mapped by a
/// shared linear embedding (weight (win^2, win^2), bias (win^2)), then written back in place.
/// Border windows that overhang the image see zeros outside and drop overhanging outputs.
template <class T>
Var<T> window_embed(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t win) {
  using namespace detail;
  const Shape& s = x.shape();
  require_rank4(s, "window_embed");
  const std::size_t P = win * win;
  require(win >= 1 && weight.shape() == Shape{P, P} && bias.shape() == Shape{P},
          "window_embed: weight must be (win^2, win^2) and bias (win^2)");
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  const std::size_t wy_n = (H + win - 1) / win, wx_n = (W + win - 1) / win, M = planes * wy_n * wx_n;

  // Column m of the (P, M) window matrix holds window m; out-of-image taps read 0 and writes are dropped.
  auto gather = [=](const T* src, T* cols) {
    std::fill(cols, cols + P * M, T(0));
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t m = (p * wy_n + y / win) * wx_n + xx / win;
          cols[((y % win) * win + xx % win) * M + m] = src[(p * H + y) * W + xx];
        }
  };
  auto scatter = [=](const T* cols, T* dst, bool accumulate_into) {
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const std::size_t m = (p * wy_n + y / win) * wx_n + xx / win;
          const T v = cols[((y % win) * win + xx % win) * M + m];
          T& d = dst[(p * H + y) * W + xx];
          d = accumulate_into ? d + v : v;
        }
  };

  AlignedVector<T> cols(P * M), mapped(P * M);
  gather(x.value().data().data(), cols.data());
  MapMat<T> mm(mapped.data(), P, M);
  mm.noalias() = CMapMat<T>(weight.value().data().data(), P, P) * CMapMat<T>(cols.data(), P, M);
  for (std::size_t i = 0; i < P; ++i) mm.row(i).array() += bias.value()[i];
  Tensor<T> out(s);
  scatter(mapped.data(), out.data().data(), false);
  FlopCounter::add(2ull * P * P * M);

  return make_result<T>("window_embed", std::move(out), {x, weight, bias}, [=](Node<T>& n) {
    Node<T>& px = *n.parents[0];
    Node<T>& pw = *n.parents[1];
    Node<T>& pb = *n.parents[2];
    AlignedVector<T> gcols(P * M);
    gather(n.grad.data().data(), gcols.data());  // dropped outputs have zero gradient
    CMapMat<T> gm(gcols.data(), P, M);
    if (pb.requires_grad) {
      T* gb = pb.grad_buffer().data().data();
      for (std::size_t i = 0; i < P; ++i) gb[i] += gm.row(i).sum();
    }
    if (pw.requires_grad) {
      AlignedVector<T> xcols(P * M);
      gather(px.value.data().data(), xcols.data());
      MapMat<T>(pw.grad_buffer().data().data(), P, P).noalias() += gm * CMapMat<T>(xcols.data(), P, M).transpose();
    }
    if (px.requires_grad) {
      AlignedVector<T> back(P * M);
      MapMat<T>(back.data(), P, M).noalias() = CMapMat<T>(pw.value.data().data(), P, P).transpose() * gm;
      scatter(back.data(), px.grad_buffer().data().data(), true);
    }
    FlopCounter::add(4ull * P * P * M);
  });
}

/// Centered orthonormal FFT of a (batch, 2, h, w) real/imaginary tensor. The adjoint of a unitary
/// transform is its inverse, so backward applies ifft2c.
template <class T>
Var<T> fft2c(const Var<T>& x) {
  return make_result<T>("fft2c", to_channels(fft2c(from_channels(x.value()))), {x}, [](Node<T>& n) {
    auto g = to_channels(ifft2c(from_channels(n.grad)));
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
  });
}

template <class T>
Var<T> ifft2c(const Var<T>& x) {
  return make_result<T>("ifft2c", to_channels(ifft2c(from_channels(x.value()))), {x}, [](Node<T>& n) {
    auto g = to_channels(fft2c(from_channels(n.grad)));
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
  });
}

/// Data consistency on (batch, 2, h, w) k-space: sampled rows become k_u (hard) or
/// (k_pred + lambda k_u) / (1 + lambda); unsampled rows pass through.
template <class T>
Var<T> data_consistency(const Var<T>& k_pred, const Tensor<T>& k_u, const SamplingMask& mask, DcMode mode) {
  const Shape& s = k_pred.shape();
  detail::require_rank4(s, "data_consistency");
  detail::require(s == k_u.shape(), "data_consistency: shape mismatch " + shape_string(s) + " vs " +
                                        shape_string(k_u.shape()));
  check_mask_shape(mask, s[2]);
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  const T lam = static_cast<T>(mode.lambda());
  Tensor<T> out = k_pred.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < H; ++y) {
      if (!mask[y]) continue;
      for (std::size_t i = (p * H + y) * W; i < (p * H + y + 1) * W; ++i)
        out[i] = mode.is_hard() ? k_u[i] : (out[i] + lam * k_u[i]) / (T(1) + lam);
    }
  return make_result<T>("data_consistency", std::move(out), {k_pred}, [=](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    const T keep = mode.is_hard() ? T(0) : T(1) / (T(1) + lam);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < H; ++y) {
        const T f = mask[y] ? keep : T(1);
        for (std::size_t i = (p * H + y) * W; i < (p * H + y + 1) * W; ++i) gp[i] += f * n.grad[i];
      }
  });
}

/// |z| of a (batch, 2, h, w) tensor -> (batch, 1, h, w). Subgradient 0 at the origin.
template <class T>
Var<T> complex_magnitude(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4 && s[1] == 2, "complex_magnitude: expected (batch, 2, h, w)");
  const std::size_t B = s[0], N = s[2] * s[3];
  Tensor<T> out({B, 1, s[2], s[3]});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      const T re = x.value()[b * 2 * N + i], im = x.value()[b * 2 * N + N + i];
      out[b * N + i] = std::sqrt(re * re + im * im);
    }
  return make_result<T>("complex_magnitude", std::move(out), {x}, [B, N](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i) {
        const T m = n.value[b * N + i];
        if (m == T(0)) continue;
        const T g = n.grad[b * N + i] / m;
        gp[b * 2 * N + i] += g * p.value[b * 2 * N + i];
        gp[b * 2 * N + N + i] += g * p.value[b * 2 * N + N + i];
      }
  });
}

/// Mean absolute difference to a constant target; returns a scalar of shape [1].
template <class T>
Var<T> l1_loss(const Var<T>& x, const Tensor<T>& target) {
  detail::require(x.shape() == target.shape(), "l1_loss: shape mismatch " + shape_string(x.shape()) + " vs " +
                                                   shape_string(target.shape()));
  const std::size_t N = target.size();
  double acc = 0;
  for (std::size_t i = 0; i < N; ++i) acc += std::abs(static_cast<double>(x.value()[i]) - target[i]);
  Tensor<T> out({1}, static_cast<T>(acc / static_cast<double>(N)));
  return make_result<T>("l1_loss", std::move(out), {x}, [target, N](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    auto& gp = p.grad_buffer();
    const T g = n.grad[0] / static_cast<T>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const T d = p.value[i] - target[i];
      gp[i] += d > T(0) ? g : (d < T(0) ? -g : T(0));
    }
  });
}

/// Scalar sum(x * weights); used to project tensor outputs for gradient checks.
template <class T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  detail::require(x.shape() == weights.shape(), "weighted_sum: shape mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  return make_result<T>("weighted_sum", Tensor<T>({1}, acc), {x}, [weights](Node<T>& n) {
    auto& gp = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += n.grad[0] * weights[i];
  });
}

}  // namespace dudo
