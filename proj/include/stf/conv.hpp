#pragma once

#include <memory>
#include <vector>

#include "stf/gemm.hpp"
#include "stf/tape.hpp"
#include "stf/tensor.hpp"

namespace stf {

namespace detail {

// col: [Cin*k*k, OH*OW], zero padding.
template <typename T>
void im2col(const T* x, int Cin, int H, int W, int k, int stride, int pad, int OH, int OW,
            T* col) {
  for (int c = 0; c < Cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) *
                           (static_cast<std::int64_t>(OH) * OW);
        for (int oy = 0; oy < OH; ++oy) {
          const int y = oy * stride + ky - pad;
          for (int ox = 0; ox < OW; ++ox) {
            const int xx = ox * stride + kx - pad;
            dst[static_cast<std::int64_t>(oy) * OW + ox] =
                (y >= 0 && y < H && xx >= 0 && xx < W)
                    ? x[(static_cast<std::int64_t>(c) * H + y) * W + xx]
                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int Cin, int H, int W, int k, int stride, int pad, int OH, int OW,
                T* gx) {
  for (int c = 0; c < Cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) *
                                 (static_cast<std::int64_t>(OH) * OW);
        for (int oy = 0; oy < OH; ++oy) {
          const int y = oy * stride + ky - pad;
          if (y < 0 || y >= H) continue;
          for (int ox = 0; ox < OW; ++ox) {
            const int xx = ox * stride + kx - pad;
            if (xx < 0 || xx >= W) continue;
            gx[(static_cast<std::int64_t>(c) * H + y) * W + xx] +=
                src[static_cast<std::int64_t>(oy) * OW + ox];
          }
        }
      }
}

}  // namespace detail

// 2d convolution, x: [B,Cin,H,W], w: [Cout,Cin,k,k], b: [Cout] (optional).
template <typename T>
Var conv2d(Tape<T>& tp, Var x, Var w, Var b, int stride = 1, int pad = -1) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  if (xv.ndim() != 4 || wv.ndim() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3))
    throw std::invalid_argument("conv2d: bad shapes");
  const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Cout = wv.dim(0), k = wv.dim(2);
  if (pad < 0) pad = k / 2;  // same padding for stride 1
  const int OH = (H + 2 * pad - k) / stride + 1;
  const int OW = (W + 2 * pad - k) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output would be empty");
  const int K = Cin * k * k;
  const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;

  // Columns are kept for the weight-gradient GEMM in the backward pass.
  auto cols = std::make_shared<Tensor<T>>(std::vector<int>{B, K, OH * OW});
  Tensor<T> out({B, Cout, OH, OW});
  for (int n = 0; n < B; ++n) {
    T* col = cols->ptr() + static_cast<std::int64_t>(n) * K * ohw;
    detail::im2col(xv.ptr() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, k, stride,
                   pad, OH, OW, col);
    gemm(false, false, Cout, static_cast<int>(ohw), K, T(1), wv.ptr(), K, col,
         static_cast<int>(ohw), T(0), out.ptr() + static_cast<std::int64_t>(n) * Cout * ohw,
         static_cast<int>(ohw));
  }
  if (b.valid()) {
    const Tensor<T>& bv = tp.val(b);
    for (int n = 0; n < B; ++n)
      for (int o = 0; o < Cout; ++o) {
        T* p = out.ptr() + (static_cast<std::int64_t>(n) * Cout + o) * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) p[i] += bv[o];
      }
  }

  return tp.push(std::move(out),
                 [x, w, b, cols, B, Cin, H, W, Cout, k, stride, pad, OH, OW, K,
                  ohw](Tape<T>& t, Var self) {
                   const Tensor<T>& g = t.grad(self);
                   Tensor<T>& gx = t.grad(x);
                   Tensor<T>& gw = t.grad(w);
                   std::vector<T> gcol(static_cast<size_t>(K) * ohw);
                   for (int n = 0; n < B; ++n) {
                     const T* gout = g.ptr() + static_cast<std::int64_t>(n) * Cout * ohw;
                     const T* col = cols->ptr() + static_cast<std::int64_t>(n) * K * ohw;
                     // gW += gout * col^T
                     gemm(false, true, Cout, K, static_cast<int>(ohw), T(1), gout,
                          static_cast<int>(ohw), col, static_cast<int>(ohw), T(1), gw.ptr(), K);
                     // gcol = W^T * gout
                     gemm(true, false, K, static_cast<int>(ohw), Cout, T(1), t.val(w).ptr(), K,
                          gout, static_cast<int>(ohw), T(0), gcol.data(), static_cast<int>(ohw));
                     detail::col2im_add(gcol.data(), Cin, H, W, k, stride, pad, OH, OW,
                                        gx.ptr() + static_cast<std::int64_t>(n) * Cin * H * W);
                   }
                   if (b.valid()) {
                     Tensor<T>& gb = t.grad(b);
                     for (int n = 0; n < B; ++n)
                       for (int o = 0; o < Cout; ++o) {
                         const T* p = g.ptr() + (static_cast<std::int64_t>(n) * Cout + o) * ohw;
                         T acc = 0;
                         for (std::int64_t i = 0; i < ohw; ++i) acc += p[i];
                         gb[o] += acc;
                       }
                   }
                 });
}

// Deformable convolution (v1 style), stride 1, same padding. offsets:
// [B, groups*2*k*k, H, W] ordered (dy, dx) per kernel tap in row-major tap
// order, one offset field per channel group. Sampling uses bilinear
// interpolation with zeros outside the input.
template <typename T>
Var deform_conv2d(Tape<T>& tp, Var x, Var w, Var b, Var offsets, int groups = 1) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  const Tensor<T>& ov = tp.val(offsets);
  const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Cout = wv.dim(0), k = wv.dim(2);
  const int pad = k / 2;
  if (wv.dim(1) != Cin || wv.dim(3) != k) throw std::invalid_argument("deform_conv2d: bad kernel");
  if (groups < 1 || Cin % groups != 0)
    throw std::invalid_argument("deform_conv2d: groups must divide input channels");
  if (ov.dim(0) != B || ov.dim(1) != groups * 2 * k * k || ov.dim(2) != H || ov.dim(3) != W)
    throw std::invalid_argument("deform_conv2d: bad offset shape");
  const int K = Cin * k * k;
  const int cg = Cin / groups;
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;

  auto cols = std::make_shared<Tensor<T>>(std::vector<int>{B, K, H * W});
  Tensor<T> out({B, Cout, H, W});

  // The sampling geometry is identical for every input channel, so it is
  // computed once per (tap, pixel) and the channel loop runs innermost.
  for (int n = 0; n < B; ++n) {
    T* col = cols->ptr() + static_cast<std::int64_t>(n) * K * hw;
    const T* off = ov.ptr() + static_cast<std::int64_t>(n) * groups * 2 * k * k * hw;
    const T* imgs = xv.ptr() + static_cast<std::int64_t>(n) * Cin * hw;
    for (int g = 0; g < groups; ++g)
      for (int tap = 0; tap < k * k; ++tap) {
        const int ky = tap / k, kx = tap % k;
        const T* offy = off + static_cast<std::int64_t>(g * 2 * k * k + 2 * tap) * hw;
        const T* offx = off + static_cast<std::int64_t>(g * 2 * k * k + 2 * tap + 1) * hw;
        T* dst0 = col + (static_cast<std::int64_t>(g) * cg * k * k + tap) * hw;
        const T* img0 = imgs + static_cast<std::int64_t>(g) * cg * hw;
        for (int oy = 0; oy < H; ++oy)
          for (int ox = 0; ox < W; ++ox) {
            const std::int64_t p = static_cast<std::int64_t>(oy) * W + ox;
            const T sy = static_cast<T>(oy + ky - pad) + offy[p];
            const T sx = static_cast<T>(ox + kx - pad) + offx[p];
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            const T fy = sy - y0, fx = sx - x0;
            std::int64_t idx[4];
            T wgt[4];
            int m = 0;
            for (int dy = 0; dy <= 1; ++dy)
              for (int dx = 0; dx <= 1; ++dx) {
                const int yy = y0 + dy, xc = x0 + dx;
                if (yy < 0 || yy >= H || xc < 0 || xc >= W) continue;
                idx[m] = static_cast<std::int64_t>(yy) * W + xc;
                wgt[m] = (dy ? fy : T(1) - fy) * (dx ? fx : T(1) - fx);
                ++m;
              }
            T* dst = dst0 + p;
            const T* img = img0;
            for (int c = 0; c < cg; ++c, dst += static_cast<std::int64_t>(k) * k * hw, img += hw) {
              T v = 0;
              for (int i = 0; i < m; ++i) v += wgt[i] * img[idx[i]];
              *dst = v;
            }
          }
      }
    gemm(false, false, Cout, static_cast<int>(hw), K, T(1), wv.ptr(), K, col,
         static_cast<int>(hw), T(0), out.ptr() + static_cast<std::int64_t>(n) * Cout * hw,
         static_cast<int>(hw));
  }
  if (b.valid()) {
    const Tensor<T>& bv = tp.val(b);
    for (int n = 0; n < B; ++n)
      for (int o = 0; o < Cout; ++o) {
        T* p = out.ptr() + (static_cast<std::int64_t>(n) * Cout + o) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] += bv[o];
      }
  }

  return tp.push(std::move(out), [x, w, b, offsets, cols, B, Cin, H, W, Cout, k, pad, K, groups,
                                  cg, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv2 = t.val(x);
    const Tensor<T>& ov2 = t.val(offsets);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gw = t.grad(w);
    Tensor<T>& goff = t.grad(offsets);
    std::vector<T> gcol(static_cast<size_t>(K) * hw);
    for (int n = 0; n < B; ++n) {
      const T* gout = g.ptr() + static_cast<std::int64_t>(n) * Cout * hw;
      const T* col = cols->ptr() + static_cast<std::int64_t>(n) * K * hw;
      gemm(false, true, Cout, K, static_cast<int>(hw), T(1), gout, static_cast<int>(hw), col,
           static_cast<int>(hw), T(1), gw.ptr(), K);
      gemm(true, false, K, static_cast<int>(hw), Cout, T(1), t.val(w).ptr(), K, gout,
           static_cast<int>(hw), T(0), gcol.data(), static_cast<int>(hw));

      const T* off = ov2.ptr() + static_cast<std::int64_t>(n) * groups * 2 * k * k * hw;
      T* goffn = goff.ptr() + static_cast<std::int64_t>(n) * groups * 2 * k * k * hw;
      const T* imgs = xv2.ptr() + static_cast<std::int64_t>(n) * Cin * hw;
      T* gimgs = gx.ptr() + static_cast<std::int64_t>(n) * Cin * hw;
      for (int g2 = 0; g2 < groups; ++g2)
        for (int tap = 0; tap < k * k; ++tap) {
          const int ky = tap / k, kx = tap % k;
          const T* offy = off + static_cast<std::int64_t>(g2 * 2 * k * k + 2 * tap) * hw;
          const T* offx = off + static_cast<std::int64_t>(g2 * 2 * k * k + 2 * tap + 1) * hw;
          T* goffy = goffn + static_cast<std::int64_t>(g2 * 2 * k * k + 2 * tap) * hw;
          T* goffx = goffn + static_cast<std::int64_t>(g2 * 2 * k * k + 2 * tap + 1) * hw;
          const T* gc0 = gcol.data() + (static_cast<std::int64_t>(g2) * cg * k * k + tap) * hw;
          const T* img0 = imgs + static_cast<std::int64_t>(g2) * cg * hw;
          T* gimg0 = gimgs + static_cast<std::int64_t>(g2) * cg * hw;
          for (int oy = 0; oy < H; ++oy)
            for (int ox = 0; ox < W; ++ox) {
              const std::int64_t p = static_cast<std::int64_t>(oy) * W + ox;
              const T sy = static_cast<T>(oy + ky - pad) + offy[p];
              const T sx = static_cast<T>(ox + kx - pad) + offx[p];
              const int y0 = static_cast<int>(std::floor(sy));
              const int x0 = static_cast<int>(std::floor(sx));
              const T fy = sy - y0, fx = sx - x0;
              std::int64_t idx[4];
              T wgt[4], sgny[4], sgnx[4];
              int m = 0;
              for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                  const int yy = y0 + dy, xc = x0 + dx;
                  if (yy < 0 || yy >= H || xc < 0 || xc >= W) continue;
                  const T wy = dy ? fy : T(1) - fy;
                  const T wx = dx ? fx : T(1) - fx;
                  idx[m] = static_cast<std::int64_t>(yy) * W + xc;
                  wgt[m] = wy * wx;
                  sgny[m] = (dy ? T(1) : T(-1)) * wx;
                  sgnx[m] = (dx ? T(1) : T(-1)) * wy;
                  ++m;
                }
              T acc_y = 0, acc_x = 0;
              const T* gc = gc0 + p;
              const T* img = img0;
              T* gimg = gimg0;
              for (int c = 0; c < cg;
                   ++c, gc += static_cast<std::int64_t>(k) * k * hw, img += hw, gimg += hw) {
                const T gv = *gc;
                if (gv == T(0)) continue;
                for (int i = 0; i < m; ++i) {
                  const T pix = img[idx[i]];
                  gimg[idx[i]] += gv * wgt[i];
                  acc_y += gv * sgny[i] * pix;
                  acc_x += gv * sgnx[i] * pix;
                }
              }
              goffy[p] += acc_y;
              goffx[p] += acc_x;
            }
        }
    }
    if (b.valid()) {
      Tensor<T>& gb = t.grad(b);
      for (int n = 0; n < B; ++n)
        for (int o = 0; o < Cout; ++o) {
          const T* p = g.ptr() + (static_cast<std::int64_t>(n) * Cout + o) * hw;
          T acc = 0;
          for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
          gb[o] += acc;
        }
    }
  });
}

}  // namespace stf
