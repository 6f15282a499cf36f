#pragma once

#include <Eigen/Core>
#include <vector>

#include "ganshot/tensor.hpp"

// Low-level convolution arithmetic shared by conv2d and conv_transpose2d.
// Three primitives cover forward and backward of both ops:
//   gather  : y[n,a,oh,ow]  = sum_{b,kh,kw} x[n,b,oh*s+kh-p, ow*s+kw-p] * k[a,b,kh,kw]
//   scatter : y[n,a,h*s+kh-p, w*s+kw-p] += x[n,b,h,w] * k[b,a,kh,kw]   (adjoint of gather)
//   wgrad   : dk[a,b,kh,kw] = sum_{n,oh,ow} og[n,a,oh,ow] * inp[n,b,oh*s+kh-p, ow*s+kw-p]
// Each has a direct loop kernel and an im2col/GEMM path; they must agree to
// within accumulation-order rounding.

namespace ganshot {

enum class ConvAlgo { auto_algo, direct, im2col };

namespace detail {

struct ConvGeom {
  int n, in_ch, h, w;       // input
  int out_ch, kh, kw;       // kernel
  int stride, pad;
  int oh, ow;               // output spatial
};

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using MapMat = Eigen::Map<MatX<S>>;
template <typename S>
using CMapMat = Eigen::Map<const MatX<S>>;
template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;

// Patch matrix, column-major [in_ch*kh*kw, n*oh*ow]; one column per output
// position, zero where the window leaves the padded input.
template <typename S>
void im2col(const S* x, const ConvGeom& g, std::vector<S>& col) {
  const long long rows = static_cast<long long>(g.in_ch) * g.kh * g.kw;
  col.assign(rows * g.n * g.oh * g.ow, S(0));
  long long j = 0;
  for (int n = 0; n < g.n; ++n) {
    const S* xn = x + static_cast<long long>(n) * g.in_ch * g.h * g.w;
    for (int oh = 0; oh < g.oh; ++oh) {
      for (int ow = 0; ow < g.ow; ++ow, ++j) {
        S* cj = col.data() + j * rows;
        for (int b = 0; b < g.in_ch; ++b) {
          const S* xb = xn + static_cast<long long>(b) * g.h * g.w;
          for (int kh = 0; kh < g.kh; ++kh) {
            const int ih = oh * g.stride + kh - g.pad;
            if (ih < 0 || ih >= g.h) {
              cj += g.kw;
              continue;
            }
            const int iw0 = ow * g.stride - g.pad;
            for (int kw = 0; kw < g.kw; ++kw, ++cj) {
              const int iw = iw0 + kw;
              if (iw >= 0 && iw < g.w) *cj = xb[ih * g.w + iw];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void conv_gather_direct(const S* x, const S* k, const ConvGeom& g, S* y) {
  for (int n = 0; n < g.n; ++n)
    for (int a = 0; a < g.out_ch; ++a)
      for (int oh = 0; oh < g.oh; ++oh)
        for (int ow = 0; ow < g.ow; ++ow) {
          S acc = 0;
          for (int b = 0; b < g.in_ch; ++b)
            for (int kh = 0; kh < g.kh; ++kh)
              for (int kw = 0; kw < g.kw; ++kw) {
                const int ih = oh * g.stride + kh - g.pad;
                const int iw = ow * g.stride + kw - g.pad;
                if (ih < 0 || ih >= g.h || iw < 0 || iw >= g.w) continue;
                acc += x[((static_cast<long long>(n) * g.in_ch + b) * g.h + ih) * g.w + iw] *
                       k[((static_cast<long long>(a) * g.in_ch + b) * g.kh + kh) * g.kw + kw];
              }
          y[((static_cast<long long>(n) * g.out_ch + a) * g.oh + oh) * g.ow + ow] = acc;
        }
}

template <typename S>
void conv_gather_gemm(const S* x, const S* k, const ConvGeom& g, S* y) {
  const long long rows = static_cast<long long>(g.in_ch) * g.kh * g.kw;
  const long long cols = static_cast<long long>(g.n) * g.oh * g.ow;
  std::vector<S> col;
  im2col(x, g, col);
  CMapRM<S> kmat(k, g.out_ch, rows);
  CMapMat<S> cmat(col.data(), rows, cols);
  MatX<S> prod(g.out_ch, cols);
  prod.noalias() = kmat * cmat;
  // [out_ch, n*oh*ow] -> [n, out_ch, oh, ow]
  const long long plane = static_cast<long long>(g.oh) * g.ow;
  for (int n = 0; n < g.n; ++n) {
    MapRM<S> dst(y + static_cast<long long>(n) * g.out_ch * plane, g.out_ch, plane);
    dst = prod.middleCols(n * plane, plane);
  }
}

// kernel layout here is [in_ch, out_ch, kh, kw]
template <typename S>
void conv_scatter_direct(const S* x, const S* k, const ConvGeom& g, S* y) {
  std::fill(y, y + static_cast<long long>(g.n) * g.out_ch * g.oh * g.ow, S(0));
  for (int n = 0; n < g.n; ++n)
    for (int b = 0; b < g.in_ch; ++b)
      for (int h = 0; h < g.h; ++h)
        for (int w = 0; w < g.w; ++w) {
          const S xv = x[((static_cast<long long>(n) * g.in_ch + b) * g.h + h) * g.w + w];
          for (int a = 0; a < g.out_ch; ++a)
            for (int kh = 0; kh < g.kh; ++kh)
              for (int kw = 0; kw < g.kw; ++kw) {
                const int oh = h * g.stride + kh - g.pad;
                const int ow = w * g.stride + kw - g.pad;
                if (oh < 0 || oh >= g.oh || ow < 0 || ow >= g.ow) continue;
                y[((static_cast<long long>(n) * g.out_ch + a) * g.oh + oh) * g.ow + ow] +=
                    xv * k[((static_cast<long long>(b) * g.out_ch + a) * g.kh + kh) * g.kw + kw];
              }
        }
}

template <typename S>
void conv_scatter_gemm(const S* x, const S* k, const ConvGeom& g, S* y) {
  const long long hw = static_cast<long long>(g.h) * g.w;
  const long long nhw = g.n * hw;
  const long long rows = static_cast<long long>(g.out_ch) * g.kh * g.kw;
  // x arrives as [n, in_ch, h, w]; GEMM wants [in_ch, n*h*w]
  std::vector<S> xt(g.in_ch * nhw);
  for (int n = 0; n < g.n; ++n)
    for (int b = 0; b < g.in_ch; ++b) {
      const S* src = x + (static_cast<long long>(n) * g.in_ch + b) * hw;
      std::copy(src, src + hw, xt.data() + b * nhw + n * hw);
    }
  // tmp[(a,kh,kw), (n,h,w)] = sum_b k[b,a,kh,kw] * x[b,(n,h,w)]
  CMapRM<S> kmat(k, g.in_ch, rows);
  CMapRM<S> xmat(xt.data(), g.in_ch, nhw);
  MatX<S> tmp(rows, nhw);
  tmp.noalias() = kmat.transpose() * xmat;

  std::fill(y, y + static_cast<long long>(g.n) * g.out_ch * g.oh * g.ow, S(0));
  for (int n = 0; n < g.n; ++n)
    for (int h = 0; h < g.h; ++h)
      for (int w = 0; w < g.w; ++w) {
        const long long j = n * hw + static_cast<long long>(h) * g.w + w;
        const S* src = tmp.data() + j * rows;  // column of tmp
        S* yn = y + static_cast<long long>(n) * g.out_ch * g.oh * g.ow;
        for (int a = 0; a < g.out_ch; ++a)
          for (int kh = 0; kh < g.kh; ++kh) {
            const int oh = h * g.stride + kh - g.pad;
            if (oh < 0 || oh >= g.oh) {
              src += g.kw;
              continue;
            }
            const int ow0 = w * g.stride - g.pad;
            for (int kw = 0; kw < g.kw; ++kw, ++src) {
              const int ow = ow0 + kw;
              if (ow >= 0 && ow < g.ow)
                yn[(static_cast<long long>(a) * g.oh + oh) * g.ow + ow] += *src;
            }
          }
      }
}

// accumulates into dk, layout [out_ch(of og), in_ch(of inp), kh, kw]
template <typename S>
void conv_wgrad_direct(const S* inp, const S* og, const ConvGeom& g, S* dk) {
  for (int a = 0; a < g.out_ch; ++a)
    for (int b = 0; b < g.in_ch; ++b)
      for (int kh = 0; kh < g.kh; ++kh)
        for (int kw = 0; kw < g.kw; ++kw) {
          S acc = 0;
          for (int n = 0; n < g.n; ++n)
            for (int oh = 0; oh < g.oh; ++oh)
              for (int ow = 0; ow < g.ow; ++ow) {
                const int ih = oh * g.stride + kh - g.pad;
                const int iw = ow * g.stride + kw - g.pad;
                if (ih < 0 || ih >= g.h || iw < 0 || iw >= g.w) continue;
                acc += og[((static_cast<long long>(n) * g.out_ch + a) * g.oh + oh) * g.ow + ow] *
                       inp[((static_cast<long long>(n) * g.in_ch + b) * g.h + ih) * g.w + iw];
              }
          dk[((static_cast<long long>(a) * g.in_ch + b) * g.kh + kh) * g.kw + kw] += acc;
        }
}

template <typename S>
void conv_wgrad_gemm(const S* inp, const S* og, const ConvGeom& g, S* dk) {
  const long long rows = static_cast<long long>(g.in_ch) * g.kh * g.kw;
  const long long cols = static_cast<long long>(g.n) * g.oh * g.ow;
  const long long plane = static_cast<long long>(g.oh) * g.ow;
  std::vector<S> col;
  im2col(inp, g, col);
  // og as [out_ch, n*oh*ow]
  std::vector<S> ogt(g.out_ch * cols);
  for (int n = 0; n < g.n; ++n)
    for (int a = 0; a < g.out_ch; ++a) {
      const S* src = og + (static_cast<long long>(n) * g.out_ch + a) * plane;
      std::copy(src, src + plane, ogt.data() + a * cols + n * plane);
    }
  CMapRM<S> ogm(ogt.data(), g.out_ch, cols);
  CMapMat<S> cmat(col.data(), rows, cols);
  MapRM<S> dkm(dk, g.out_ch, rows);
  dkm.noalias() += ogm * cmat.transpose();
}

inline bool use_gemm(ConvAlgo algo) { return algo != ConvAlgo::direct; }

template <typename S>
void conv_gather(const S* x, const S* k, const ConvGeom& g, S* y, ConvAlgo algo) {
  if (use_gemm(algo)) conv_gather_gemm(x, k, g, y);
  else conv_gather_direct(x, k, g, y);
}
template <typename S>
void conv_scatter(const S* x, const S* k, const ConvGeom& g, S* y, ConvAlgo algo) {
  if (use_gemm(algo)) conv_scatter_gemm(x, k, g, y);
  else conv_scatter_direct(x, k, g, y);
}
template <typename S>
void conv_wgrad(const S* inp, const S* og, const ConvGeom& g, S* dk, ConvAlgo algo) {
  if (use_gemm(algo)) conv_wgrad_gemm(inp, og, g, dk);
  else conv_wgrad_direct(inp, og, g, dk);
}

}  // namespace detail
}  // namespace ganshot
