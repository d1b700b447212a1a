#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "stf/tape.hpp"
#include "stf/tensor.hpp"

namespace stf {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return tp.push(std::move(out), [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return tp.push(std::move(out), [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& av = tp.val(a);
  const Tensor<T>& bv = tp.val(b);
  if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
  Tensor<T> out = av;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return tp.push(std::move(out), [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av2 = t.val(a);
    const Tensor<T>& bv2 = t.val(b);
    Tensor<T>& ga = t.grad(a);
    Tensor<T>& gb = t.grad(b);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i] * bv2[i];
      gb[i] += g[i] * av2[i];
    }
  });
}

template <typename T>
Var add_scalar(Tape<T>& tp, Var a, T c) {
  Tensor<T> out = tp.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  return tp.push(std::move(out), [a](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var mul_scalar(Tape<T>& tp, Var a, T c) {
  Tensor<T> out = tp.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return tp.push(std::move(out), [a, c](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
  });
}

template <typename T>
Var relu(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], T(0));
  return tp.push(std::move(out), [a](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& av = t.val(a);
    Tensor<T>& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      if (av[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var sigmoid(Tape<T>& tp, Var a) {
  Tensor<T> out = tp.val(a);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
  return tp.push(std::move(out), [a](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& s = t.val(self);
    Tensor<T>& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s[i] * (T(1) - s[i]);
  });
}

// ---------------------------------------------------------------------------
// Broadcast ops over [B,C,H,W]
// ---------------------------------------------------------------------------

// x: [B,C,H,W], b: [C]
template <typename T>
Var add_bias(Tape<T>& tp, Var x, Var b) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& bv = tp.val(b);
  if (xv.ndim() != 4 || bv.ndim() != 1 || bv.dim(0) != xv.dim(1))
    throw std::invalid_argument("add_bias: bad shapes");
  Tensor<T> out = xv;
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = out.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      const T bc = bv[c];
      for (std::int64_t i = 0; i < hw; ++i) p[i] += bc;
    }
  return tp.push(std::move(out), [x, b, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gb = t.grad(b);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const T* gp = g.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
        T* gxp = gx.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
        T acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
          gxp[i] += gp[i];
          acc += gp[i];
        }
        gb[c] += acc;
      }
  });
}

// x: [B,C,H,W], s: [B,C] -> x * s broadcast over H,W
template <typename T>
Var mul_channel(Tape<T>& tp, Var x, Var s) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& sv = tp.val(s);
  if (xv.ndim() != 4 || sv.ndim() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
    throw std::invalid_argument("mul_channel: bad shapes");
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  Tensor<T> out = xv;
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = out.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      const T sc = sv.at(n, c);
      for (std::int64_t i = 0; i < hw; ++i) p[i] *= sc;
    }
  return tp.push(std::move(out), [x, s, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv2 = t.val(x);
    const Tensor<T>& sv2 = t.val(s);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gs = t.grad(s);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
        const T sc = sv2.at(n, c);
        T acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
          gx[base + i] += g[base + i] * sc;
          acc += g[base + i] * xv2[base + i];
        }
        gs.at(n, c) += acc;
      }
  });
}

// x: [B,C,H,W], m: [B,1,H,W] -> x * m broadcast over C
template <typename T>
Var mul_spatial(Tape<T>& tp, Var x, Var m) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& mv = tp.val(m);
  if (xv.ndim() != 4 || mv.ndim() != 4 || mv.dim(0) != xv.dim(0) || mv.dim(1) != 1 ||
      mv.dim(2) != xv.dim(2) || mv.dim(3) != xv.dim(3))
    throw std::invalid_argument("mul_spatial: bad shapes");
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  Tensor<T> out = xv;
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = out.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      const T* mp = mv.ptr() + static_cast<std::int64_t>(n) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] *= mp[i];
    }
  return tp.push(std::move(out), [x, m, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv2 = t.val(x);
    const Tensor<T>& mv2 = t.val(m);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gm = t.grad(m);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t xb = (static_cast<std::int64_t>(n) * C + c) * hw;
        const std::int64_t mb = static_cast<std::int64_t>(n) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          gx[xb + i] += g[xb + i] * mv2[mb + i];
          gm[mb + i] += g[xb + i] * xv2[xb + i];
        }
      }
  });
}

// Per-channel affine y = scale[c] * x + shift[c]; scale, shift: [C].
template <typename T>
Var channel_affine(Tape<T>& tp, Var x, Var scale, Var shift) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& sv = tp.val(scale);
  const Tensor<T>& bv = tp.val(shift);
  if (xv.ndim() != 4 || sv.ndim() != 1 || sv.dim(0) != xv.dim(1) || !sv.same_shape(bv))
    throw std::invalid_argument("channel_affine: bad shapes");
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  Tensor<T> out = xv;
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = out.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] = sv[c] * p[i] + bv[c];
    }
  return tp.push(std::move(out), [x, scale, shift, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv2 = t.val(x);
    const Tensor<T>& sv2 = t.val(scale);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gs = t.grad(scale);
    Tensor<T>& gb = t.grad(shift);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
        T accs = 0, accb = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
          gx[base + i] += g[base + i] * sv2[c];
          accs += g[base + i] * xv2[base + i];
          accb += g[base + i];
        }
        gs[c] += accs;
        gb[c] += accb;
      }
  });
}

// ---------------------------------------------------------------------------
// Pooling / statistics
// ---------------------------------------------------------------------------

// Global average over H,W: [B,C,H,W] -> [B,C]
template <typename T>
Var gap_hw(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  if (xv.ndim() != 4) throw std::invalid_argument("gap_hw: need 4d input");
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  if (hw == 0) throw std::invalid_argument("gap_hw: empty spatial dims");
  Tensor<T> out({B, C});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = xv.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      T acc = 0;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      out.at(n, c) = acc / static_cast<T>(hw);
    }
  return tp.push(std::move(out), [x, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    const T inv = T(1) / static_cast<T>(hw);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const T gv = g.at(n, c) * inv;
        T* p = gx.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
      }
  });
}

// Global max over H,W: [B,C,H,W] -> [B,C]
template <typename T>
Var gmp_hw(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  if (xv.ndim() != 4) throw std::invalid_argument("gmp_hw: need 4d input");
  const int B = xv.dim(0), C = xv.dim(1);
  const std::int64_t hw = xv.dim(2) * static_cast<std::int64_t>(xv.dim(3));
  Tensor<T> out({B, C});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(B) * C);
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = xv.ptr() + (static_cast<std::int64_t>(n) * C + c) * hw;
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < hw; ++i)
        if (p[i] > p[best]) best = i;
      out.at(n, c) = p[best];
      (*argmax)[static_cast<size_t>(n) * C + c] = best;
    }
  return tp.push(std::move(out), [x, B, C, hw, argmax](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c)
        gx[(static_cast<std::int64_t>(n) * C + c) * hw +
           (*argmax)[static_cast<size_t>(n) * C + c]] += g.at(n, c);
  });
}

// Mean over channels: [B,C,H,W] -> [B,1,H,W]
template <typename T>
Var channel_mean(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor<T> out({B, 1, H, W});
  for (int n = 0; n < B; ++n)
    for (std::int64_t i = 0; i < hw; ++i) {
      T acc = 0;
      for (int c = 0; c < C; ++c) acc += xv[(static_cast<std::int64_t>(n) * C + c) * hw + i];
      out[static_cast<std::int64_t>(n) * hw + i] = acc / static_cast<T>(C);
    }
  return tp.push(std::move(out), [x, B, C, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    const T inv = T(1) / static_cast<T>(C);
    for (int n = 0; n < B; ++n)
      for (std::int64_t i = 0; i < hw; ++i) {
        const T gv = g[static_cast<std::int64_t>(n) * hw + i] * inv;
        for (int c = 0; c < C; ++c) gx[(static_cast<std::int64_t>(n) * C + c) * hw + i] += gv;
      }
  });
}

// Max over channels: [B,C,H,W] -> [B,1,H,W]
template <typename T>
Var channel_max(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor<T> out({B, 1, H, W});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(B) * hw);
  for (int n = 0; n < B; ++n)
    for (std::int64_t i = 0; i < hw; ++i) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (xv[(static_cast<std::int64_t>(n) * C + c) * hw + i] >
            xv[(static_cast<std::int64_t>(n) * C + best) * hw + i])
          best = c;
      out[static_cast<std::int64_t>(n) * hw + i] =
          xv[(static_cast<std::int64_t>(n) * C + best) * hw + i];
      (*argmax)[static_cast<size_t>(n) * hw + i] = best;
    }
  return tp.push(std::move(out), [x, B, C, hw, argmax](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (int n = 0; n < B; ++n)
      for (std::int64_t i = 0; i < hw; ++i) {
        const int c = (*argmax)[static_cast<size_t>(n) * hw + i];
        gx[(static_cast<std::int64_t>(n) * C + c) * hw + i] +=
            g[static_cast<std::int64_t>(n) * hw + i];
      }
  });
}

// 3x3 stride-2 average pooling, pad 1, averaging over valid taps only
// (constants pass through unchanged). Output is [B,C,ceil(H/2),ceil(W/2)].
template <typename T>
Var avg_pool_3x3_s2(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H < 1 || W < 1) throw std::invalid_argument("avg_pool_3x3_s2: empty input");
  const int OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<T> out({B, C, OH, OW});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          const int y0 = std::max(0, 2 * oy - 1), y1 = std::min(H - 1, 2 * oy + 1);
          const int x0 = std::max(0, 2 * ox - 1), x1 = std::min(W - 1, 2 * ox + 1);
          T acc = 0;
          for (int y = y0; y <= y1; ++y)
            for (int xx = x0; xx <= x1; ++xx) acc += xv.at(n, c, y, xx);
          out.at(n, c, oy, ox) = acc / static_cast<T>((y1 - y0 + 1) * (x1 - x0 + 1));
        }
  return tp.push(std::move(out), [x, B, C, H, W, OH, OW](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            const int y0 = std::max(0, 2 * oy - 1), y1 = std::min(H - 1, 2 * oy + 1);
            const int x0 = std::max(0, 2 * ox - 1), x1 = std::min(W - 1, 2 * ox + 1);
            const T gv = g.at(n, c, oy, ox) / static_cast<T>((y1 - y0 + 1) * (x1 - x0 + 1));
            for (int y = y0; y <= y1; ++y)
              for (int xx = x0; xx <= x1; ++xx) gx.at(n, c, y, xx) += gv;
          }
  });
}

// Nearest-neighbor resize to (OH,OW), source index floor(i*H/OH).
template <typename T>
Var upsample_nearest(Tape<T>& tp, Var x, int OH, int OW) {
  const Tensor<T>& xv = tp.val(x);
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  auto ymap = std::make_shared<std::vector<int>>(OH);
  auto xmap = std::make_shared<std::vector<int>>(OW);
  for (int i = 0; i < OH; ++i)
    (*ymap)[static_cast<size_t>(i)] = static_cast<int>(static_cast<std::int64_t>(i) * H / OH);
  for (int i = 0; i < OW; ++i)
    (*xmap)[static_cast<size_t>(i)] = static_cast<int>(static_cast<std::int64_t>(i) * W / OW);
  Tensor<T> out({B, C, OH, OW});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox)
          out.at(n, c, oy, ox) = xv.at(n, c, (*ymap)[oy], (*xmap)[ox]);
  return tp.push(std::move(out), [x, B, C, OH, OW, ymap, xmap](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox)
            gx.at(n, c, (*ymap)[oy], (*xmap)[ox]) += g.at(n, c, oy, ox);
  });
}

namespace detail {

// Per output index: source range [lo, hi) averaged with weight 1/(hi-lo).
// Bin-average when target <= source, nearest (single index) when target > source.
inline void axis_plan(int src, int dst, std::vector<int>& lo, std::vector<int>& hi) {
  lo.resize(static_cast<size_t>(dst));
  hi.resize(static_cast<size_t>(dst));
  if (dst <= src) {
    for (int i = 0; i < dst; ++i) {
      lo[static_cast<size_t>(i)] = static_cast<int>(static_cast<std::int64_t>(i) * src / dst);
      hi[static_cast<size_t>(i)] =
          static_cast<int>((static_cast<std::int64_t>(i + 1) * src + dst - 1) / dst);
    }
  } else {
    for (int i = 0; i < dst; ++i) {
      const int s = static_cast<int>(static_cast<std::int64_t>(i) * src / dst);
      lo[static_cast<size_t>(i)] = s;
      hi[static_cast<size_t>(i)] = s + 1;
    }
  }
}

}  // namespace detail

// Adaptive average pooling to arbitrary target dims; when the target is larger
// than the source on an axis, nearest-neighbor interpolation is used on that axis.
template <typename T>
Var adaptive_pool(Tape<T>& tp, Var x, int OH, int OW) {
  const Tensor<T>& xv = tp.val(x);
  if (OH < 1 || OW < 1) throw std::invalid_argument("adaptive_pool: target dims must be >= 1");
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  auto ylo = std::make_shared<std::vector<int>>(), yhi = std::make_shared<std::vector<int>>();
  auto xlo = std::make_shared<std::vector<int>>(), xhi = std::make_shared<std::vector<int>>();
  detail::axis_plan(H, OH, *ylo, *yhi);
  detail::axis_plan(W, OW, *xlo, *xhi);
  Tensor<T> out({B, C, OH, OW});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          T acc = 0;
          for (int y = (*ylo)[oy]; y < (*yhi)[oy]; ++y)
            for (int xx = (*xlo)[ox]; xx < (*xhi)[ox]; ++xx) acc += xv.at(n, c, y, xx);
          out.at(n, c, oy, ox) =
              acc / static_cast<T>(((*yhi)[oy] - (*ylo)[oy]) * ((*xhi)[ox] - (*xlo)[ox]));
        }
  return tp.push(std::move(out), [x, B, C, OH, OW, ylo, yhi, xlo, xhi](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < OH; ++oy)
          for (int ox = 0; ox < OW; ++ox) {
            const T gv = g.at(n, c, oy, ox) /
                         static_cast<T>(((*yhi)[oy] - (*ylo)[oy]) * ((*xhi)[ox] - (*xlo)[ox]));
            for (int y = (*ylo)[oy]; y < (*yhi)[oy]; ++y)
              for (int xx = (*xlo)[ox]; xx < (*xhi)[ox]; ++xx) gx.at(n, c, y, xx) += gv;
          }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& tp, Var x, std::vector<int> shape) {
  Tensor<T> out = tp.val(x).reshaped(std::move(shape));
  return tp.push(std::move(out), [x](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

// Concatenate along channel axis of [B,C_i,H,W] tensors.
template <typename T>
Var concat_channels(Tape<T>& tp, const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
  const Tensor<T>& first = tp.val(xs[0]);
  const int B = first.dim(0), H = first.dim(2), W = first.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  int Cout = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = tp.val(v);
    if (xv.dim(0) != B || xv.dim(2) != H || xv.dim(3) != W)
      throw std::invalid_argument("concat_channels: shape mismatch");
    Cout += xv.dim(1);
  }
  Tensor<T> out({B, Cout, H, W});
  auto offs = std::make_shared<std::vector<int>>();
  int off = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = tp.val(v);
    const int C = xv.dim(1);
    offs->push_back(off);
    for (int n = 0; n < B; ++n)
      std::copy(xv.ptr() + static_cast<std::int64_t>(n) * C * hw,
                xv.ptr() + static_cast<std::int64_t>(n + 1) * C * hw,
                out.ptr() + (static_cast<std::int64_t>(n) * Cout + off) * hw);
    off += C;
  }
  auto xs_copy = std::make_shared<std::vector<Var>>(xs);
  return tp.push(std::move(out), [xs_copy, offs, B, Cout, hw](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    for (size_t k = 0; k < xs_copy->size(); ++k) {
      Tensor<T>& gx = t.grad((*xs_copy)[k]);
      const int C = gx.dim(1);
      const int off2 = (*offs)[k];
      for (int n = 0; n < B; ++n) {
        const T* gp = g.ptr() + (static_cast<std::int64_t>(n) * Cout + off2) * hw;
        T* gxp = gx.ptr() + static_cast<std::int64_t>(n) * C * hw;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(C) * hw; ++i) gxp[i] += gp[i];
      }
    }
  });
}

// Dense layer over the last axis: x [N,Cin] x W [Cout,Cin] (+ optional b [Cout]).
template <typename T>
Var dense(Tape<T>& tp, Var x, Var w, Var b = {}) {
  const Tensor<T>& xv = tp.val(x);
  const Tensor<T>& wv = tp.val(w);
  if (xv.ndim() != 2 || wv.ndim() != 2 || wv.dim(1) != xv.dim(1))
    throw std::invalid_argument("dense: bad shapes");
  const int N = xv.dim(0), Cin = xv.dim(1), Cout = wv.dim(0);
  Tensor<T> out({N, Cout});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < Cout; ++o) {
      T acc = b.valid() ? tp.val(b)[o] : T(0);
      for (int i = 0; i < Cin; ++i) acc += xv.at(n, i) * wv.at(o, i);
      out.at(n, o) = acc;
    }
  return tp.push(std::move(out), [x, w, b, N, Cin, Cout](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv2 = t.val(x);
    const Tensor<T>& wv2 = t.val(w);
    Tensor<T>& gx = t.grad(x);
    Tensor<T>& gw = t.grad(w);
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < Cout; ++o) {
        const T gv = g.at(n, o);
        for (int i = 0; i < Cin; ++i) {
          gx.at(n, i) += gv * wv2.at(o, i);
          gw.at(o, i) += gv * xv2.at(n, i);
        }
      }
    if (b.valid()) {
      Tensor<T>& gb = t.grad(b);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < Cout; ++o) gb[o] += g.at(n, o);
    }
  });
}

// Elementwise maximum over same-shaped tensors.
template <typename T>
Var elem_max(Tape<T>& tp, const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("elem_max: empty input");
  Tensor<T> out = tp.val(xs[0]);
  auto arg = std::make_shared<std::vector<int>>(static_cast<size_t>(out.numel()), 0);
  for (size_t k = 1; k < xs.size(); ++k) {
    const Tensor<T>& xv = tp.val(xs[k]);
    if (!xv.same_shape(out)) throw std::invalid_argument("elem_max: shape mismatch");
    for (std::int64_t i = 0; i < out.numel(); ++i)
      if (xv[i] > out[i]) {
        out[i] = xv[i];
        (*arg)[static_cast<size_t>(i)] = static_cast<int>(k);
      }
  }
  auto xs_copy = std::make_shared<std::vector<Var>>(xs);
  return tp.push(std::move(out), [xs_copy, arg](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    for (std::int64_t i = 0; i < g.numel(); ++i)
      t.grad((*xs_copy)[static_cast<size_t>((*arg)[static_cast<size_t>(i)])])[i] += g[i];
  });
}

// Elementwise median over same-shaped tensors; for an even count the two
// middle values are averaged (each receiving half the gradient).
template <typename T>
Var elem_median(Tape<T>& tp, const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("elem_median: empty input");
  const int n = static_cast<int>(xs.size());
  const Tensor<T>& first = tp.val(xs[0]);
  Tensor<T> out = Tensor<T>::zeros_like(first);
  // Indices of the contributing operand(s) per element, -1 second slot if odd n.
  auto lo = std::make_shared<std::vector<int>>(static_cast<size_t>(out.numel()));
  auto hi = std::make_shared<std::vector<int>>(static_cast<size_t>(out.numel()));
  std::vector<std::pair<T, int>> vals(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    for (int k = 0; k < n; ++k) {
      const Tensor<T>& xv = tp.val(xs[static_cast<size_t>(k)]);
      if (!xv.same_shape(first)) throw std::invalid_argument("elem_median: shape mismatch");
      vals[static_cast<size_t>(k)] = {xv[i], k};
    }
    std::sort(vals.begin(), vals.end());
    if (n % 2 == 1) {
      out[i] = vals[static_cast<size_t>(n / 2)].first;
      (*lo)[static_cast<size_t>(i)] = vals[static_cast<size_t>(n / 2)].second;
      (*hi)[static_cast<size_t>(i)] = -1;
    } else {
      out[i] = (vals[static_cast<size_t>(n / 2 - 1)].first +
                vals[static_cast<size_t>(n / 2)].first) /
               T(2);
      (*lo)[static_cast<size_t>(i)] = vals[static_cast<size_t>(n / 2 - 1)].second;
      (*hi)[static_cast<size_t>(i)] = vals[static_cast<size_t>(n / 2)].second;
    }
  }
  auto xs_copy = std::make_shared<std::vector<Var>>(xs);
  return tp.push(std::move(out), [xs_copy, lo, hi](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad(self);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const int l = (*lo)[static_cast<size_t>(i)], h = (*hi)[static_cast<size_t>(i)];
      if (h < 0) {
        t.grad((*xs_copy)[static_cast<size_t>(l)])[i] += g[i];
      } else {
        t.grad((*xs_copy)[static_cast<size_t>(l)])[i] += g[i] / T(2);
        t.grad((*xs_copy)[static_cast<size_t>(h)])[i] += g[i] / T(2);
      }
    }
  });
}

template <typename T>
Var sum_all(Tape<T>& tp, Var x) {
  const Tensor<T>& xv = tp.val(x);
  T acc = 0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  return tp.push(Tensor<T>({1}, {acc}), [x](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(x);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

}  // namespace stf
