#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "adk/parallel.hpp"
#include "adk/tensor.hpp"

namespace adk {

namespace detail {

struct ConvDims {
  std::int64_t n, c, h, w;    // input
  std::int64_t k, kh, kw;     // kernel
  std::int64_t ho, wo;        // output
  int stride, padding;
};

template <typename T>
ConvDims conv_check(Tensor<T> input, Tensor<T> kernel,
                    Tensor<T> bias, int stride, int padding) {
  if (input.ndim() != 4)
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " +
                                shape_str(input.shape()));
  if (kernel.ndim() != 4)
    throw std::invalid_argument("conv2d: kernel must be [K,C,kh,kw], got " +
                                shape_str(kernel.shape()));
  if (input.dim(1) != kernel.dim(1))
    throw std::invalid_argument("conv2d: channel mismatch, input " +
                                shape_str(input.shape()) + " kernel " +
                                shape_str(kernel.shape()));
  if (stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  ConvDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
             kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0, stride, padding};
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d.k))
    throw std::invalid_argument("conv2d: bias must be [K]");
  return d;
}

// Forward accumulation order per output element: bias first (when present),
// then input channel outermost, then kernel rows, then kernel columns. The
// naive-loop oracle in the tests relies on this order being exact.
template <typename T>
void conv_forward(const T* x, const T* w, const T* b, T* y, const ConvDims& d) {
  parallel_for(d.n * d.k, [&](std::int64_t nk) {
    const std::int64_t n = nk / d.k, k = nk % d.k;
    T* ybase = y + (n * d.k + k) * d.ho * d.wo;
    const T init = b ? b[k] : T(0);
    std::fill(ybase, ybase + d.ho * d.wo, init);
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* xplane = x + (n * d.c + c) * d.h * d.w;
      const T* wbase = w + (k * d.c + c) * d.kh * d.kw;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride + ky - d.padding;
          if (iy < 0 || iy >= d.h) continue;
          const T* xrow = xplane + iy * d.w;
          T* yrow = ybase + oy * d.wo;
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            const T wv = wbase[ky * d.kw + kx];
            // valid ox range: 0 <= ox*stride + kx - padding < w
            std::int64_t lo = 0, off = kx - d.padding;
            if (off < 0) lo = (-off + d.stride - 1) / d.stride;
            std::int64_t hi = d.wo;  // exclusive
            if (off + (hi - 1) * d.stride >= d.w)
              hi = (d.w - 1 - off) / d.stride + 1;
            if (hi < lo) hi = lo;
            const T* xp = xrow + off + lo * d.stride;
            T* yp = yrow + lo;
            const std::int64_t len = hi - lo;
            if (d.stride == 1) {
              for (std::int64_t i = 0; i < len; ++i) yp[i] += wv * xp[i];
            } else {
              for (std::int64_t i = 0; i < len; ++i) yp[i] += wv * xp[i * d.stride];
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv_backward_input(const T* w, const T* gy, T* gx, const ConvDims& d) {
  parallel_for(d.n * d.c, [&](std::int64_t nc) {
    const std::int64_t n = nc / d.c, c = nc % d.c;
    T* gxplane = gx + (n * d.c + c) * d.h * d.w;
    for (std::int64_t k = 0; k < d.k; ++k) {
      const T* gybase = gy + (n * d.k + k) * d.ho * d.wo;
      const T* wbase = w + (k * d.c + c) * d.kh * d.kw;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * d.stride + ky - d.padding;
          if (iy < 0 || iy >= d.h) continue;
          T* gxrow = gxplane + iy * d.w;
          const T* gyrow = gybase + oy * d.wo;
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            const T wv = wbase[ky * d.kw + kx];
            std::int64_t lo = 0, off = kx - d.padding;
            if (off < 0) lo = (-off + d.stride - 1) / d.stride;
            std::int64_t hi = d.wo;
            if (off + (hi - 1) * d.stride >= d.w)
              hi = (d.w - 1 - off) / d.stride + 1;
            if (hi < lo) hi = lo;
            for (std::int64_t i = lo; i < hi; ++i)
              gxrow[off + i * d.stride] += wv * gyrow[i];
          }
        }
      }
    }
  });
}

template <typename T>
void conv_backward_kernel(const T* x, const T* gy, T* gw, const ConvDims& d) {
  parallel_for(d.k * d.c, [&](std::int64_t kc) {
    const std::int64_t k = kc / d.c, c = kc % d.c;
    T* gwbase = gw + (k * d.c + c) * d.kh * d.kw;
    for (std::int64_t ky = 0; ky < d.kh; ++ky) {
      for (std::int64_t kx = 0; kx < d.kw; ++kx) {
        T acc = T(0);
        for (std::int64_t n = 0; n < d.n; ++n) {
          const T* xplane = x + (n * d.c + c) * d.h * d.w;
          const T* gybase = gy + (n * d.k + k) * d.ho * d.wo;
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride + ky - d.padding;
            if (iy < 0 || iy >= d.h) continue;
            const T* xrow = xplane + iy * d.w;
            const T* gyrow = gybase + oy * d.wo;
            std::int64_t lo = 0, off = kx - d.padding;
            if (off < 0) lo = (-off + d.stride - 1) / d.stride;
            std::int64_t hi = d.wo;
            if (off + (hi - 1) * d.stride >= d.w)
              hi = (d.w - 1 - off) / d.stride + 1;
            if (hi < lo) hi = lo;
            for (std::int64_t i = lo; i < hi; ++i)
              acc += xrow[off + i * d.stride] * gyrow[i];
          }
        }
        gwbase[ky * d.kw + kx] += acc;
      }
    }
  });
}

}  // namespace detail

// Cross-correlation, NCHW layout. H' = (H + 2*padding - kh)/stride + 1.
template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> kernel,
                 Tensor<T> bias, int stride, int padding) {
  detail::ConvDims d = detail::conv_check(input, kernel, bias, stride, padding);
  std::vector<T> out(static_cast<std::size_t>(d.n * d.k * d.ho * d.wo));
  detail::conv_forward(input.data().data(), kernel.data().data(),
                       bias.defined() ? bias.data().data() : nullptr, out.data(), d);
  std::vector<Tensor<T>> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  return Tensor<T>::make_op(
      Shape{d.n, d.k, d.ho, d.wo}, std::move(out), std::move(parents),
      [input, kernel, bias, d](detail::Node<T>& node) mutable {
        const T* gy = node.grad.data();
        if (input.requires_grad()) {
          detail::conv_backward_input(kernel.data().data(), gy,
                                      input.grad_buffer().data(), d);
        }
        if (kernel.requires_grad()) {
          detail::conv_backward_kernel(input.data().data(), gy,
                                       kernel.grad_buffer().data(), d);
        }
        if (bias.defined() && bias.requires_grad()) {
          auto& gb = bias.grad_buffer();
          for (std::int64_t k = 0; k < d.k; ++k) {
            T acc = T(0);
            for (std::int64_t n = 0; n < d.n; ++n) {
              const T* p = gy + (n * d.k + k) * d.ho * d.wo;
              for (std::int64_t i = 0; i < d.ho * d.wo; ++i) acc += p[i];
            }
            gb[static_cast<std::size_t>(k)] += acc;
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> kernel, int stride,
                 int padding) {
  return conv2d(input, kernel, Tensor<T>{}, stride, padding);
}

// x [N,Din] * W^T [Din,Dout] + b -> [N,Dout]
template <typename T>
Tensor<T> linear(Tensor<T> x, Tensor<T> weight, Tensor<T> bias) {
  if (x.ndim() != 2 || weight.ndim() != 2 || x.dim(1) != weight.dim(1))
    throw std::invalid_argument("linear: expected x[N,Din], weight[Dout,Din]");
  const std::int64_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != dout))
    throw std::invalid_argument("linear: bias must be [Dout]");
  std::vector<T> out(static_cast<std::size_t>(n * dout));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.defined() ? bias.data().data() : nullptr;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t o = 0; o < dout; ++o) {
      T acc = bd ? bd[o] : T(0);
      for (std::int64_t k = 0; k < din; ++k) acc += xd[i * din + k] * wd[o * din + k];
      out[static_cast<std::size_t>(i * dout + o)] = acc;
    }
  }
  std::vector<Tensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor<T>::make_op(
      Shape{n, dout}, std::move(out), std::move(parents),
      [x, weight, bias, n, din, dout](detail::Node<T>& node) mutable {
        const T* gy = node.grad.data();
        if (x.requires_grad()) {
          auto& gx = x.grad_buffer();
          const T* wd2 = weight.data().data();
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t k = 0; k < din; ++k) {
              T acc = T(0);
              for (std::int64_t o = 0; o < dout; ++o)
                acc += gy[i * dout + o] * wd2[o * din + k];
              gx[i * din + k] += acc;
            }
        }
        if (weight.requires_grad()) {
          auto& gw = weight.grad_buffer();
          const T* xd2 = x.data().data();
          for (std::int64_t o = 0; o < dout; ++o)
            for (std::int64_t k = 0; k < din; ++k) {
              T acc = T(0);
              for (std::int64_t i = 0; i < n; ++i)
                acc += gy[i * dout + o] * xd2[i * din + k];
              gw[o * din + k] += acc;
            }
        }
        if (bias.defined() && bias.requires_grad()) {
          auto& gb = bias.grad_buffer();
          for (std::int64_t o = 0; o < dout; ++o) {
            T acc = T(0);
            for (std::int64_t i = 0; i < n; ++i) acc += gy[i * dout + o];
            gb[static_cast<std::size_t>(o)] += acc;
          }
        }
      });
}

// Batched matmul: a [B,M,K] x b [B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("matmul: expected [B,M,K] x [B,K,N]");
  const std::int64_t bs = a.dim(0), m = a.dim(1), kk = a.dim(2), nn = b.dim(2);
  std::vector<T> out(static_cast<std::size_t>(bs * m * nn));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::int64_t bi = 0; bi < bs; ++bi)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < nn; ++j) {
        T acc = T(0);
        for (std::int64_t k = 0; k < kk; ++k)
          acc += ad[(bi * m + i) * kk + k] * bd[(bi * kk + k) * nn + j];
        out[static_cast<std::size_t>((bi * m + i) * nn + j)] = acc;
      }
  return Tensor<T>::make_op(
      Shape{bs, m, nn}, std::move(out), {a, b},
      [a, b, bs, m, kk, nn](detail::Node<T>& node) mutable {
        const T* gy = node.grad.data();
        if (a.requires_grad()) {
          auto& ga = a.grad_buffer();
          const T* bd2 = b.data().data();
          for (std::int64_t bi = 0; bi < bs; ++bi)
            for (std::int64_t i = 0; i < m; ++i)
              for (std::int64_t k = 0; k < kk; ++k) {
                T acc = T(0);
                for (std::int64_t j = 0; j < nn; ++j)
                  acc += gy[(bi * m + i) * nn + j] * bd2[(bi * kk + k) * nn + j];
                ga[(bi * m + i) * kk + k] += acc;
              }
        }
        if (b.requires_grad()) {
          auto& gb = b.grad_buffer();
          const T* ad2 = a.data().data();
          for (std::int64_t bi = 0; bi < bs; ++bi)
            for (std::int64_t k = 0; k < kk; ++k)
              for (std::int64_t j = 0; j < nn; ++j) {
                T acc = T(0);
                for (std::int64_t i = 0; i < m; ++i)
                  acc += ad2[(bi * m + i) * kk + k] * gy[(bi * m + i) * nn + j];
                gb[(bi * kk + k) * nn + j] += acc;
              }
        }
      });
}

// Softmax over the last dimension, max-subtracted for stability.
template <typename T>
Tensor<T> softmax_lastdim(Tensor<T> a) {
  if (a.ndim() < 1) throw std::invalid_argument("softmax_lastdim: rank 0");
  const std::int64_t l = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.numel() / l;
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  const T* ad = a.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = ad + r * l;
    T mx = row[0];
    for (std::int64_t j = 1; j < l; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::int64_t j = 0; j < l; ++j) {
      T e = std::exp(row[j] - mx);
      out[static_cast<std::size_t>(r * l + j)] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < l; ++j)
      out[static_cast<std::size_t>(r * l + j)] /= denom;
  }
  return Tensor<T>::make_op(
      a.shape(), std::move(out), {a},
      [a, rows, l](detail::Node<T>& node) mutable {
        if (!a.requires_grad()) return;
        auto& g = a.grad_buffer();
        // y recomputed row by row; dx_i = y_i * (g_i - sum_j y_j g_j)
        const T* ad2 = a.data().data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* row = ad2 + r * l;
          const T* gy = node.grad.data() + r * l;
          T mx = row[0];
          for (std::int64_t j = 1; j < l; ++j) mx = std::max(mx, row[j]);
          std::vector<T> y(static_cast<std::size_t>(l));
          T denom = T(0);
          for (std::int64_t j = 0; j < l; ++j) {
            y[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
            denom += y[static_cast<std::size_t>(j)];
          }
          T dot = T(0);
          for (std::int64_t j = 0; j < l; ++j) {
            y[static_cast<std::size_t>(j)] /= denom;
            dot += y[static_cast<std::size_t>(j)] * gy[j];
          }
          for (std::int64_t j = 0; j < l; ++j)
            g[r * l + j] += y[static_cast<std::size_t>(j)] * (gy[j] - dot);
        }
      });
}

// Nearest-neighbour x2 upsampling of NCHW maps.
template <typename T>
Tensor<T> upsample_nearest2(Tensor<T> a) {
  if (a.ndim() != 4) throw std::invalid_argument("upsample_nearest2: expected NCHW");
  const std::int64_t n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n * c * 4 * h * w));
  const T* ad = a.data().data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const T* src = ad + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t x = 0; x < 2 * w; ++x)
        dst[y * 2 * w + x] = src[(y / 2) * w + (x / 2)];
  }
  return Tensor<T>::make_op(
      Shape{n, c, 2 * h, 2 * w}, std::move(out), {a},
      [a, n, c, h, w](detail::Node<T>& node) mutable {
        if (!a.requires_grad()) return;
        auto& g = a.grad_buffer();
        for (std::int64_t p = 0; p < n * c; ++p) {
          const T* gy = node.grad.data() + p * 4 * h * w;
          T* gx = g.data() + p * h * w;
          for (std::int64_t y = 0; y < 2 * h; ++y)
            for (std::int64_t x = 0; x < 2 * w; ++x)
              gx[(y / 2) * w + (x / 2)] += gy[y * 2 * w + x];
        }
      });
}

// x [N,C,H,W] + v [N,C] broadcast over the spatial plane.
template <typename T>
Tensor<T> add_per_sample_channel(Tensor<T> x, Tensor<T> v) {
  if (x.ndim() != 4 || v.ndim() != 2 || x.dim(0) != v.dim(0) || x.dim(1) != v.dim(1))
    throw std::invalid_argument("add_per_sample_channel: expected x[N,C,H,W], v[N,C]");
  const std::int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.data().begin(), x.data().end());
  const T* vd = v.data().data();
  for (std::int64_t p = 0; p < nc; ++p) {
    const T add = vd[p];
    T* dst = out.data() + p * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] += add;
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, v},
      [x, v, nc, hw](detail::Node<T>& node) mutable {
        if (x.requires_grad()) {
          auto& g = x.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
        }
        if (v.requires_grad()) {
          auto& g = v.grad_buffer();
          for (std::int64_t p = 0; p < nc; ++p) {
            T acc = T(0);
            const T* gy = node.grad.data() + p * hw;
            for (std::int64_t i = 0; i < hw; ++i) acc += gy[i];
            g[static_cast<std::size_t>(p)] += acc;
          }
        }
      });
}

// Group normalization over [N,C,H,W]; statistics per (sample, group).
template <typename T>
Tensor<T> group_norm(Tensor<T> x, Tensor<T> gamma,
                     Tensor<T> beta, int groups, T eps = T(1e-5)) {
  if (x.ndim() != 4) throw std::invalid_argument("group_norm: expected NCHW");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups < 1 || c % groups != 0)
    throw std::invalid_argument("group_norm: channels must divide into groups");
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
    throw std::invalid_argument("group_norm: gamma/beta must be [C]");
  const std::int64_t cg = c / groups;  // channels per group
  const std::int64_t m = cg * hw;      // elements per group
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  std::vector<T> mean_v(static_cast<std::size_t>(n * groups));
  std::vector<T> rstd_v(static_cast<std::size_t>(n * groups));
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const T* base = xd + (i * c + g * cg) * hw;
      T mu = T(0);
      for (std::int64_t j = 0; j < m; ++j) mu += base[j];
      mu /= static_cast<T>(m);
      T var = T(0);
      for (std::int64_t j = 0; j < m; ++j) {
        T dv = base[j] - mu;
        var += dv * dv;
      }
      var /= static_cast<T>(m);
      T rstd = T(1) / std::sqrt(var + eps);
      mean_v[static_cast<std::size_t>(i * groups + g)] = mu;
      rstd_v[static_cast<std::size_t>(i * groups + g)] = rstd;
      T* obase = out.data() + (i * c + g * cg) * hw;
      for (std::int64_t cc = 0; cc < cg; ++cc) {
        const T ga = gd[g * cg + cc], be = bd[g * cg + cc];
        for (std::int64_t j = 0; j < hw; ++j)
          obase[cc * hw + j] = (base[cc * hw + j] - mu) * rstd * ga + be;
      }
    }
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, hw, groups, cg, m, mean_v, rstd_v](detail::Node<T>& node) mutable {
        const T* xd2 = x.data().data();
        const T* gd2 = gamma.data().data();
        const T* gy = node.grad.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            T dg = T(0), db = T(0);
            const std::int64_t g = ch / cg;
            for (std::int64_t i = 0; i < n; ++i) {
              const T mu = mean_v[static_cast<std::size_t>(i * groups + g)];
              const T rstd = rstd_v[static_cast<std::size_t>(i * groups + g)];
              const T* xrow = xd2 + (i * c + ch) * hw;
              const T* grow = gy + (i * c + ch) * hw;
              for (std::int64_t j = 0; j < hw; ++j) {
                db += grow[j];
                dg += grow[j] * (xrow[j] - mu) * rstd;
              }
            }
            if (gamma.requires_grad()) gamma.grad_buffer()[static_cast<std::size_t>(ch)] += dg;
            if (beta.requires_grad()) beta.grad_buffer()[static_cast<std::size_t>(ch)] += db;
          }
        }
        if (x.requires_grad()) {
          auto& gx = x.grad_buffer();
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t g = 0; g < groups; ++g) {
              const T mu = mean_v[static_cast<std::size_t>(i * groups + g)];
              const T rstd = rstd_v[static_cast<std::size_t>(i * groups + g)];
              const T* xbase = xd2 + (i * c + g * cg) * hw;
              const T* gybase = gy + (i * c + g * cg) * hw;
              // accumulate sum(dxhat) and sum(dxhat * xhat) over the group
              T s1 = T(0), s2 = T(0);
              for (std::int64_t cc = 0; cc < cg; ++cc) {
                const T ga = gd2[g * cg + cc];
                for (std::int64_t j = 0; j < hw; ++j) {
                  const T dxhat = gybase[cc * hw + j] * ga;
                  const T xhat = (xbase[cc * hw + j] - mu) * rstd;
                  s1 += dxhat;
                  s2 += dxhat * xhat;
                }
              }
              T* gxbase = gx.data() + (i * c + g * cg) * hw;
              const T inv_m = T(1) / static_cast<T>(m);
              for (std::int64_t cc = 0; cc < cg; ++cc) {
                const T ga = gd2[g * cg + cc];
                for (std::int64_t j = 0; j < hw; ++j) {
                  const T dxhat = gybase[cc * hw + j] * ga;
                  const T xhat = (xbase[cc * hw + j] - mu) * rstd;
                  gxbase[cc * hw + j] += rstd * (dxhat - inv_m * s1 - xhat * inv_m * s2);
                }
              }
            }
          }
        }
      });
}

}  // namespace adk
