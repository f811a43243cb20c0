#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cntl/autograd.hpp"
#include "cntl/tensor.hpp"

// Differentiable tensor ops. Every op issues its documented multiply-
// accumulate cost to the active MacCounter:
//   conv            C_out * (C_in / groups) * k^2 * H_out * W_out per item
//   bilinear resize 4 per output element
//   weighted pool   C * H * W per item
//   elementwise     1 per output element (relu, add, gate, sigmoid,
//                   normalization, softmax)
//   max-pool, concat, coordinate channels: 0

namespace cntl::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Unfolds a (channels x H x W) block into (channels*k*k) x (Ho*Wo); rows of
// the output are `stride` elements apart (default Ho*Wo).
template <typename T>
void im2col(const T* src, int channels, int h, int w, int k, int pad, T* col, std::size_t stride = 0) {
  const int ho = h + 2 * pad - k + 1;
  const int wo = w + 2 * pad - k + 1;
  if (stride == 0) stride = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    const T* plane = src + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * stride;
        const int dj = kj - pad;
        const int j0 = std::max(0, -dj);
        const int j1 = std::min(wo, w - dj);
        for (int oi = 0; oi < ho; ++oi) {
          T* out = row + static_cast<std::size_t>(oi) * wo;
          const int ii = oi + ki - pad;
          if (ii < 0 || ii >= h || j0 >= j1) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* in = plane + static_cast<std::size_t>(ii) * w;
          std::fill(out, out + j0, T(0));
          std::copy(in + j0 + dj, in + j1 + dj, out + j0);
          std::fill(out + j1, out + wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, int k, int pad, T* dst, std::size_t stride = 0) {
  const int ho = h + 2 * pad - k + 1;
  const int wo = w + 2 * pad - k + 1;
  if (stride == 0) stride = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    T* plane = dst + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * stride;
        const int dj = kj - pad;
        const int j0 = std::max(0, -dj);
        const int j1 = std::min(wo, w - dj);
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi + ki - pad;
          if (ii < 0 || ii >= h) continue;
          const T* in = row + static_cast<std::size_t>(oi) * wo;
          T* out = plane + static_cast<std::size_t>(ii) * w;
          for (int j = j0; j < j1; ++j) out[j + dj] += in[j];
        }
      }
    }
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

// Linear-interpolation taps for align_corners=false resizing along one axis.
struct ResizeTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

inline ResizeTaps resize_taps(int in, int out) {
  ResizeTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[o] = i0;
    t.hi[o] = std::min(i0 + 1, in - 1);
    t.frac[o] = src - i0;
  }
  return t;
}

}  // namespace detail

namespace detail {

// Batch chunk size keeping the unfolded column buffer near 64K elements.
inline int conv_chunk(int batch, int krows, std::size_t npix) {
  const std::size_t per = static_cast<std::size_t>(krows) * npix;
  return static_cast<int>(std::clamp<std::size_t>((std::size_t(1) << 16) / std::max<std::size_t>(per, 1), 1, batch));
}

// Writes the (krows x npix) column block of one image at `col`, rows `stride` apart.
template <typename T>
void unfold(const T* src, int channels, int h, int w, int k, int pad, bool direct, T* col, std::size_t stride) {
  if (!direct) return im2col(src, channels, h, w, k, pad, col, stride);
  const std::size_t npix = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) std::copy(src + c * npix, src + (c + 1) * npix, col + c * stride);
}

}  // namespace detail

// 2-D convolution, stride 1, symmetric zero padding, optional grouping.
// Weight layout: C_out x (C_in / groups) x k x k. `bias` may be null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int pad, int groups = 1) {
  using namespace detail;
  const Shape xs = x->value.shape();
  const Shape ws = weight->value.shape();
  const int k = ws.h;
  if (ws.h != ws.w) throw ShapeError("conv2d: non-square kernel");
  if (xs.c % groups != 0 || ws.b % groups != 0)
    throw ShapeError("conv2d: channels not divisible by groups");
  const int cin_g = xs.c / groups;
  const int cout_g = ws.b / groups;
  if (ws.c != cin_g)
    throw ShapeError("conv2d: weight expects " + std::to_string(ws.c * groups) + " input channels, got " +
                     std::to_string(xs.c));
  if (bias && static_cast<int>(bias->value.size()) != ws.b) throw ShapeError("conv2d: bias size mismatch");
  const int ho = xs.h + 2 * pad - k + 1;
  const int wo = xs.w + 2 * pad - k + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: input smaller than kernel");
  const bool direct = (k == 1 && pad == 0);
  const int krows = cin_g * k * k;
  const std::size_t npix = static_cast<std::size_t>(ho) * wo;

  // Images are processed in chunks whose unfolded columns sit side by side,
  // so each group needs one GEMM per chunk rather than one per image.
  const int chunk = conv_chunk(xs.b, krows, npix);

  Tensor<T> out(xs.b, ws.b, ho, wo);
  {
    std::vector<T> col(static_cast<std::size_t>(krows) * chunk * npix);
    std::vector<T> res(static_cast<std::size_t>(cout_g) * chunk * npix);
    for (int b0 = 0; b0 < xs.b; b0 += chunk) {
      const int nb = std::min(chunk, xs.b - b0);
      const std::size_t cols = static_cast<std::size_t>(nb) * npix;
      for (int g = 0; g < groups; ++g) {
        for (int j = 0; j < nb; ++j)
          unfold(x->value.plane(b0 + j, g * cin_g), cin_g, xs.h, xs.w, k, pad, direct, col.data() + j * npix, cols);
        ConstMapMat<T> wm(weight->value.data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
        ConstMapMat<T> cm(col.data(), krows, cols);
        MapMat<T> rm(res.data(), cout_g, cols);
        rm.noalias() = wm * cm;
        for (int j = 0; j < nb; ++j)
          for (int o = 0; o < cout_g; ++o) {
            const T* src = res.data() + o * cols + j * npix;
            T* dst = out.plane(b0 + j, g * cout_g + o);
            const T bv = bias ? bias->value[g * cout_g + o] : T(0);
            for (std::size_t i = 0; i < npix; ++i) dst[i] = src[i] + bv;
          }
      }
    }
  }
  add_macs(static_cast<std::uint64_t>(xs.b) * ws.b * cin_g * k * k * npix);

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_result<T>(std::move(out), std::move(parents), [xs, ws, k, pad, groups, cin_g, cout_g, krows, direct, npix, chunk](Node<T>& self) {
    const Var<T>& xv = self.parents[0];
    const Var<T>& wv = self.parents[1];
    const Tensor<T>& gout = self.grad;
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& db = self.parents[2]->grad_buffer();
      for (int b = 0; b < xs.b; ++b)
        for (int o = 0; o < ws.b; ++o) {
          const T* p = gout.plane(b, o);
          T s = 0;
          for (std::size_t i = 0; i < npix; ++i) s += p[i];
          db[o] += s;
        }
    }
    std::vector<T> col(wv->requires_grad ? static_cast<std::size_t>(krows) * chunk * npix : 0);
    std::vector<T> dcol(xv->requires_grad ? static_cast<std::size_t>(krows) * chunk * npix : 0);
    std::vector<T> gcat(static_cast<std::size_t>(cout_g) * chunk * npix);
    for (int b0 = 0; b0 < xs.b; b0 += chunk) {
      const int nb = std::min(chunk, xs.b - b0);
      const std::size_t cols = static_cast<std::size_t>(nb) * npix;
      for (int g = 0; g < groups; ++g) {
        for (int j = 0; j < nb; ++j)
          for (int o = 0; o < cout_g; ++o) {
            const T* src = gout.plane(b0 + j, g * cout_g + o);
            std::copy(src, src + npix, gcat.data() + o * cols + j * npix);
          }
        ConstMapMat<T> gm(gcat.data(), cout_g, cols);
        if (wv->requires_grad) {
          for (int j = 0; j < nb; ++j)
            unfold(xv->value.plane(b0 + j, g * cin_g), cin_g, xs.h, xs.w, k, pad, direct, col.data() + j * npix, cols);
          ConstMapMat<T> cm(col.data(), krows, cols);
          MapMat<T> dw(wv->grad_buffer().data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
          dw.noalias() += gm * cm.transpose();
        }
        if (xv->requires_grad) {
          ConstMapMat<T> wm(wv->value.data() + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
          MapMat<T> dcm(dcol.data(), krows, cols);
          dcm.noalias() = wm.transpose() * gm;
          for (int j = 0; j < nb; ++j) {
            T* dx = xv->grad_buffer().plane(b0 + j, g * cin_g);
            const T* src = dcol.data() + j * npix;
            if (direct) {
              for (int c = 0; c < krows; ++c)
                for (std::size_t i = 0; i < npix; ++i) dx[c * npix + i] += src[c * cols + i];
            } else {
              col2im(src, cin_g, xs.h, xs.w, k, pad, dx, cols);
            }
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const T* s = x->value.data();
  T* d = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) d[i] = s[i] > T(0) ? s[i] : T(0);
  add_macs(out.size());
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    T* d = gx.data();
    for (std::size_t i = 0, n = gx.size(); i < n; ++i)
      if (y[i] > T(0)) d[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const T* s = x->value.data();
  T* d = out.data();
  for (std::size_t i = 0, n = out.size(); i < n; ++i) d[i] = T(1) / (T(1) + std::exp(-s[i]));
  add_macs(out.size());
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    T* d = gx.data();
    for (std::size_t i = 0, n = gx.size(); i < n; ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value.shape(), b->value.shape(), "add");
  Tensor<T> out = a->value;
  detail::add_into(out, b->value);
  add_macs(out.size());
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  });
}

// x (B x C x H x W) + v (B x C x 1 x 1) broadcast over space.
template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& v) {
  const Shape xs = x->value.shape();
  const Shape vs = v->value.shape();
  if (vs.b != xs.b || vs.c != xs.c || vs.h != 1 || vs.w != 1)
    throw ShapeError("add_broadcast: expected " + std::to_string(xs.b) + "x" + std::to_string(xs.c) + "x1x1, got " +
                     vs.str());
  Tensor<T> out = x->value;
  const std::size_t hw = xs.plane();
  for (int b = 0; b < xs.b; ++b)
    for (int c = 0; c < xs.c; ++c) {
      T* p = out.plane(b, c);
      const T add = v->value.at(b, c, 0, 0);
      for (std::size_t i = 0; i < hw; ++i) p[i] += add;
    }
  add_macs(out.size());
  return make_result<T>(std::move(out), {x, v}, [xs, hw](Node<T>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) {
      auto& gv = self.parents[1]->grad_buffer();
      for (int b = 0; b < xs.b; ++b)
        for (int c = 0; c < xs.c; ++c) {
          const T* g = self.grad.plane(b, c);
          T s = 0;
          for (std::size_t i = 0; i < hw; ++i) s += g[i];
          gv.at(b, c, 0, 0) += s;
        }
    }
  });
}

// out[c] = x[c] * gate[group(c)], group(c) = floor(c * G / C).
template <typename T>
Var<T> group_gate(const Var<T>& x, const Var<T>& gate) {
  const Shape xs = x->value.shape();
  const Shape gs = gate->value.shape();
  if (gs.b != xs.b || gs.h != xs.h || gs.w != xs.w || xs.c % gs.c != 0)
    throw ShapeError("group_gate: incompatible shapes " + xs.str() + " and " + gs.str());
  const int per = xs.c / gs.c;
  const std::size_t hw = xs.plane();
  Tensor<T> out(xs);
  for (int b = 0; b < xs.b; ++b)
    for (int c = 0; c < xs.c; ++c) {
      const T* xp = x->value.plane(b, c);
      const T* gp = gate->value.plane(b, c / per);
      T* op = out.plane(b, c);
      for (std::size_t i = 0; i < hw; ++i) op[i] = xp[i] * gp[i];
    }
  add_macs(out.size());
  return make_result<T>(std::move(out), {x, gate}, [xs, per, hw](Node<T>& self) {
    const Var<T>& xv = self.parents[0];
    const Var<T>& gv = self.parents[1];
    for (int b = 0; b < xs.b; ++b)
      for (int c = 0; c < xs.c; ++c) {
        const T* g = self.grad.plane(b, c);
        if (xv->requires_grad) {
          T* dx = xv->grad_buffer().plane(b, c);
          const T* gp = gv->value.plane(b, c / per);
          for (std::size_t i = 0; i < hw; ++i) dx[i] += g[i] * gp[i];
        }
        if (gv->requires_grad) {
          T* dg = gv->grad_buffer().plane(b, c / per);
          const T* xp = xv->value.plane(b, c);
          for (std::size_t i = 0; i < hw; ++i) dg[i] += g[i] * xp[i];
        }
      }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts.front()->value.shape();
  int total = 0;
  for (const auto& p : parts) {
    const Shape ps = p->value.shape();
    if (ps.b != s.b || ps.h != s.h || ps.w != s.w)
      throw ShapeError("concat_channels: spatial mismatch " + s.str() + " vs " + ps.str());
    total += ps.c;
  }
  s.c = total;
  Tensor<T> out(s);
  const std::size_t hw = s.plane();
  for (int b = 0; b < s.b; ++b) {
    int off = 0;
    for (const auto& p : parts) {
      const int pc = p->value.channels();
      std::copy_n(p->value.plane(b, 0), pc * hw, out.plane(b, off));
      off += pc;
    }
  }
  return make_result<T>(std::move(out), parts, [hw](Node<T>& self) {
    const int nb = self.value.batch();
    int off = 0;
    for (auto& p : self.parents) {
      const int pc = p->value.channels();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (int b = 0; b < nb; ++b) {
          const T* src = self.grad.plane(b, off);
          T* dst = g.plane(b, 0);
          for (std::size_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
        }
      }
      off += pc;
    }
  });
}

// 2x2 max-pool, stride 2 (floor on odd sizes). Ties resolve to the first
// maximum in row-major window order.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Shape xs = x->value.shape();
  const int ho = xs.h / 2, wo = xs.w / 2;
  if (ho < 1 || wo < 1) throw ShapeError("max_pool2: input too small " + xs.str());
  Tensor<T> out(xs.b, xs.c, ho, wo);
  std::vector<std::uint32_t> arg(out.size());
  std::size_t k = 0;
  for (int b = 0; b < xs.b; ++b)
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x->value.plane(b, c);
      T* o = out.plane(b, c);
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j, ++k) {
          std::uint32_t best = (2 * i) * xs.w + 2 * j;
          for (std::uint32_t cand : {static_cast<std::uint32_t>((2 * i) * xs.w + 2 * j + 1),
                                     static_cast<std::uint32_t>((2 * i + 1) * xs.w + 2 * j),
                                     static_cast<std::uint32_t>((2 * i + 1) * xs.w + 2 * j + 1)})
            if (p[cand] > p[best]) best = cand;
          o[i * wo + j] = p[best];
          arg[k] = best;
        }
    }
  return make_result<T>(std::move(out), {x}, [arg = std::move(arg), xs, ho, wo](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    std::size_t k = 0;
    for (int b = 0; b < xs.b; ++b)
      for (int c = 0; c < xs.c; ++c) {
        T* d = gx.plane(b, c);
        const T* g = self.grad.plane(b, c);
        for (int i = 0; i < ho * wo; ++i, ++k) d[arg[k]] += g[i];
      }
  });
}

// Bilinear resize with align_corners=false semantics (pixel centres map to
// pixel centres; sources outside the image clamp to the border).
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w) {
  const Shape xs = x->value.shape();
  if (xs.h == out_h && xs.w == out_w) return x;
  const auto ty = detail::resize_taps(xs.h, out_h);
  const auto tx = detail::resize_taps(xs.w, out_w);
  Tensor<T> out(xs.b, xs.c, out_h, out_w);
  // separable: interpolate each input row horizontally, then blend rows
  std::vector<T> rows(static_cast<std::size_t>(xs.h) * out_w);
  for (int b = 0; b < xs.b; ++b)
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x->value.plane(b, c);
      for (int r = 0; r < xs.h; ++r) {
        const T* src = p + static_cast<std::size_t>(r) * xs.w;
        T* dst = rows.data() + static_cast<std::size_t>(r) * out_w;
        for (int j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(tx.frac[j]);
          dst[j] = src[tx.lo[j]] * (T(1) - fx) + src[tx.hi[j]] * fx;
        }
      }
      T* o = out.plane(b, c);
      for (int i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ty.frac[i]);
        const T* r0 = rows.data() + static_cast<std::size_t>(ty.lo[i]) * out_w;
        const T* r1 = rows.data() + static_cast<std::size_t>(ty.hi[i]) * out_w;
        T* dst = o + static_cast<std::size_t>(i) * out_w;
        for (int j = 0; j < out_w; ++j) dst[j] = r0[j] * (T(1) - fy) + r1[j] * fy;
      }
    }
  add_macs(4 * out.size());
  return make_result<T>(std::move(out), {x}, [xs, out_h, out_w, ty, tx](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    std::vector<T> rows(static_cast<std::size_t>(xs.h) * out_w);
    for (int b = 0; b < xs.b; ++b)
      for (int c = 0; c < xs.c; ++c) {
        std::fill(rows.begin(), rows.end(), T(0));
        const T* g = self.grad.plane(b, c);
        for (int i = 0; i < out_h; ++i) {
          const T fy = static_cast<T>(ty.frac[i]);
          T* r0 = rows.data() + static_cast<std::size_t>(ty.lo[i]) * out_w;
          T* r1 = rows.data() + static_cast<std::size_t>(ty.hi[i]) * out_w;
          const T* gi = g + static_cast<std::size_t>(i) * out_w;
          for (int j = 0; j < out_w; ++j) {
            r0[j] += gi[j] * (T(1) - fy);
            r1[j] += gi[j] * fy;
          }
        }
        T* d = gx.plane(b, c);
        for (int r = 0; r < xs.h; ++r) {
          const T* src = rows.data() + static_cast<std::size_t>(r) * out_w;
          T* dst = d + static_cast<std::size_t>(r) * xs.w;
          for (int j = 0; j < out_w; ++j) {
            const T fx = static_cast<T>(tx.frac[j]);
            dst[tx.lo[j]] += src[j] * (T(1) - fx);
            dst[tx.hi[j]] += src[j] * fx;
          }
        }
      }
  });
}

// Softmax over the H x W positions of a single-channel map, per batch item.
template <typename T>
Var<T> spatial_softmax(const Var<T>& x) {
  const Shape xs = x->value.shape();
  if (xs.c != 1) throw ShapeError("spatial_softmax: expected one channel, got " + xs.str());
  const std::size_t hw = xs.plane();
  Tensor<T> out(xs);
  for (int b = 0; b < xs.b; ++b) {
    const T* p = x->value.plane(b, 0);
    T* o = out.plane(b, 0);
    const T mx = *std::max_element(p, p + hw);
    T sum = 0;
    for (std::size_t i = 0; i < hw; ++i) sum += (o[i] = std::exp(p[i] - mx));
    for (std::size_t i = 0; i < hw; ++i) o[i] /= sum;
  }
  add_macs(out.size());
  return make_result<T>(std::move(out), {x}, [xs, hw](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (int b = 0; b < xs.b; ++b) {
      const T* y = self.value.plane(b, 0);
      const T* g = self.grad.plane(b, 0);
      T dot = 0;
      for (std::size_t i = 0; i < hw; ++i) dot += g[i] * y[i];
      T* d = gx.plane(b, 0);
      for (std::size_t i = 0; i < hw; ++i) d[i] += y[i] * (g[i] - dot);
    }
  });
}

// pooled[b, c] = sum_hw x[b, c, hw] * weights[b, 0, hw]  ->  B x C x 1 x 1.
template <typename T>
Var<T> weighted_pool(const Var<T>& x, const Var<T>& weights) {
  const Shape xs = x->value.shape();
  const Shape ws = weights->value.shape();
  if (ws.b != xs.b || ws.c != 1 || ws.h != xs.h || ws.w != xs.w)
    throw ShapeError("weighted_pool: weight map " + ws.str() + " does not match " + xs.str());
  const std::size_t hw = xs.plane();
  Tensor<T> out(xs.b, xs.c, 1, 1);
  for (int b = 0; b < xs.b; ++b) {
    const T* a = weights->value.plane(b, 0);
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x->value.plane(b, c);
      T s = 0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i] * a[i];
      out.at(b, c, 0, 0) = s;
    }
  }
  add_macs(xs.numel());
  return make_result<T>(std::move(out), {x, weights}, [xs, hw](Node<T>& self) {
    const Var<T>& xv = self.parents[0];
    const Var<T>& av = self.parents[1];
    for (int b = 0; b < xs.b; ++b)
      for (int c = 0; c < xs.c; ++c) {
        const T g = self.grad.at(b, c, 0, 0);
        if (xv->requires_grad) {
          T* d = xv->grad_buffer().plane(b, c);
          const T* a = av->value.plane(b, 0);
          for (std::size_t i = 0; i < hw; ++i) d[i] += g * a[i];
        }
        if (av->requires_grad) {
          T* d = av->grad_buffer().plane(b, 0);
          const T* p = xv->value.plane(b, c);
          for (std::size_t i = 0; i < hw; ++i) d[i] += g * p[i];
        }
      }
  });
}

namespace detail {

// Normalizes each of `groups` contiguous blocks of length n, then applies a
// per-block affine (gamma[a], beta[a]) where a = affine_index(block).
// Shared backward for channel layer-norm and per-map spatial group-norm.
template <typename T, typename AffineIndex>
Var<T> normalize_blocks(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t blocks, std::size_t n,
                        T eps, AffineIndex affine_index, bool affine_per_element) {
  Tensor<T> out(x->value.shape());
  std::vector<T> xhat(x->value.size());
  std::vector<T> inv_std(blocks);
  const T* xs = x->value.data();
  for (std::size_t g = 0; g < blocks; ++g) {
    const T* p = xs + g * n;
    T mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += p[i];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[g] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (p[i] - mean) * is;
      xhat[g * n + i] = h;
      const std::size_t a = affine_per_element ? i : affine_index(g);
      out[g * n + i] = gamma->value[a] * h + beta->value[a];
    }
  }
  add_macs(out.size());
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), blocks, n, affine_index, affine_per_element](Node<T>& self) {
        const Var<T>& xv = self.parents[0];
        const Var<T>& gv = self.parents[1];
        const Var<T>& bv = self.parents[2];
        const T* g = self.grad.data();
        for (std::size_t blk = 0; blk < blocks; ++blk) {
          const T* gb = g + blk * n;
          const T* hb = xhat.data() + blk * n;
          if (gv->requires_grad || bv->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t a = affine_per_element ? i : affine_index(blk);
              if (gv->requires_grad) gv->grad_buffer()[a] += gb[i] * hb[i];
              if (bv->requires_grad) bv->grad_buffer()[a] += gb[i];
            }
          }
          if (xv->requires_grad) {
            // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            T m1 = 0, m2 = 0;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t a = affine_per_element ? i : affine_index(blk);
              const T dh = gb[i] * gv->value[a];
              m1 += dh;
              m2 += dh * hb[i];
            }
            m1 /= static_cast<T>(n);
            m2 /= static_cast<T>(n);
            T* dx = xv->grad_buffer().data() + blk * n;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t a = affine_per_element ? i : affine_index(blk);
              const T dh = gb[i] * gv->value[a];
              dx[i] += inv_std[blk] * (dh - m1 - hb[i] * m2);
            }
          }
        }
      });
}

}  // namespace detail

// Normalizes each (item, channel) map over its H x W positions:
// y = gamma_c * (m - mean) / sqrt(var + eps) + beta_c.
template <typename T>
Var<T> group_norm_1ch(const Var<T>& m, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape s = m->value.shape();
  if (static_cast<int>(gamma->value.size()) != s.c || static_cast<int>(beta->value.size()) != s.c)
    throw ShapeError("group_norm_1ch: affine length must equal channel count " + std::to_string(s.c));
  const int c = s.c;
  return detail::normalize_blocks<T>(m, gamma, beta, static_cast<std::size_t>(s.b) * s.c, s.plane(), eps,
                                     [c](std::size_t blk) { return blk % c; }, false);
}

// Layer normalization over the channels of a B x C x 1 x 1 tensor with a
// per-channel affine.
template <typename T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape s = x->value.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("layer_norm_channels: expected Bx Cx1x1, got " + s.str());
  if (static_cast<int>(gamma->value.size()) != s.c || static_cast<int>(beta->value.size()) != s.c)
    throw ShapeError("layer_norm_channels: affine length mismatch");
  return detail::normalize_blocks<T>(x, gamma, beta, static_cast<std::size_t>(s.b), static_cast<std::size_t>(s.c), eps,
                                     [](std::size_t) { return std::size_t{0}; }, true);
}

// Appends x- and y-coordinate channels spanning [-1, 1]; a length-1 axis maps
// to 0.
template <typename T>
Tensor<T> coordinate_channels(int batch, int h, int w) {
  Tensor<T> coords(batch, 2, h, w);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        coords.at(b, 0, i, j) = w > 1 ? static_cast<T>(-1.0 + 2.0 * j / (w - 1)) : T(0);
        coords.at(b, 1, i, j) = h > 1 ? static_cast<T>(-1.0 + 2.0 * i / (h - 1)) : T(0);
      }
  return coords;
}

template <typename T>
Var<T> coordconv_augment(const Var<T>& x) {
  const Shape s = x->value.shape();
  return concat_channels<T>({x, constant(coordinate_channels<T>(s.b, s.h, s.w))});
}

// sum_i weights[i] * x[i] as a 1x1x1x1 scalar.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  require_same_shape(x->value.shape(), weights.shape(), "weighted_sum");
  T s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x->value[i];
  return make_result<T>(Tensor<T>(1, 1, 1, 1, s), {x}, [weights](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < weights.size(); ++i) g[i] += up * weights[i];
  });
}

template <typename T>
Var<T> sum_scalars(const std::vector<Var<T>>& terms) {
  Tensor<T> out(1, 1, 1, 1);
  for (const auto& t : terms) out[0] += t->value[0];
  return make_result<T>(std::move(out), terms, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer()[0] += self.grad[0];
  });
}

}  // namespace cntl::ops
