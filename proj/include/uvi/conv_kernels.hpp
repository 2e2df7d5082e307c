#pragma once
// Direct 3x3x3 convolution kernels (zero padding 1, stride 1 or 2) plus the
// matching input- and weight-gradient kernels. Everything is single threaded
// and accumulates in a fixed order, so results are reproducible bit-for-bit.
// Inner loops use std::fma explicitly: the build keeps fp-contract off
// globally, and these loops are the place where fused multiply-adds are both
// wanted and safe (no bitwise-commutativity requirement crosses them).
//
// Layouts: x[Ci][D][H][W], y[Co][Do][Ho][Wo], w[Co][Ci][3][3][3], b[Co].

#include <cmath>
#include <cstddef>
#include <vector>

#include "uvi/common.hpp"

namespace uvi::conv {

inline int out_dim(int in, int stride) { return stride == 1 ? in : (in + 1) / 2; }

namespace detail {

// Accumulate w0*row[i-1] + w1*row[i] + w2*row[i+1] into acc[i], honoring the
// zero-padded borders. Single fixed evaluation order per element.
template <class S>
inline void row_taps_s1(S* __restrict acc, const S* __restrict row, S w0, S w1,
                        S w2, int W) {
  if (W == 1) {
    acc[0] = std::fma(w1, row[0], acc[0]);
    return;
  }
  acc[0] = std::fma(w1, row[0], std::fma(w2, row[1], acc[0]));
  for (int i = 1; i + 1 < W; ++i)
    acc[i] = std::fma(w0, row[i - 1],
                      std::fma(w1, row[i], std::fma(w2, row[i + 1], acc[i])));
  acc[W - 1] = std::fma(w0, row[W - 2], std::fma(w1, row[W - 1], acc[W - 1]));
}

// Stride-2 variant: acc[i] accumulates taps at input columns 2i-1, 2i, 2i+1.
template <class S>
inline void row_taps_s2(S* __restrict acc, const S* __restrict row, S w0, S w1,
                        S w2, int W, int Wo) {
  if (W == 1) {
    acc[0] = std::fma(w1, row[0], acc[0]);
    return;
  }
  acc[0] = std::fma(w1, row[0], std::fma(w2, row[1], acc[0]));
  const int full_hi = (W - 2) / 2;  // last i with column 2i+1 in range
  for (int i = 1; i <= full_hi; ++i)
    acc[i] = std::fma(
        w0, row[2 * i - 1],
        std::fma(w1, row[2 * i], std::fma(w2, row[2 * i + 1], acc[i])));
  for (int i = full_hi + 1; i < Wo; ++i)  // odd-W tail: no right tap
    acc[i] = std::fma(w0, row[2 * i - 1], std::fma(w1, row[2 * i], acc[i]));
}

inline constexpr int kLanes = 16;

// Lane-parallel dot-product accumulation; the caller folds lanes at the end.
template <class S>
inline void dot_acc(S* __restrict acc, const S* __restrict a,
                    const S* __restrict b, int n) {
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int l = 0; l < kLanes; ++l)
      acc[l] = std::fma(a[i + l], b[i + l], acc[l]);
  for (; i < n; ++i) acc[i % kLanes] = std::fma(a[i], b[i], acc[i % kLanes]);
}

// One pass accumulating the three x-taps of a weight-gradient row into
// row-length accumulator buffers (element j of each buffer only ever meets
// element j of the operands, which keeps the loop trivially vectorizable):
//   acc0[j] += g[j+1]*x[j]   (tap dx=0, rewritten with the shift on g)
//   acc1[j] += g[j]  *x[j]
//   acc2[j] += g[j]  *x[j+1]
template <class S>
inline void wgrad_row_s1(S* __restrict acc0, S* __restrict acc1,
                         S* __restrict acc2, const S* __restrict g,
                         const S* __restrict x, int n) {
  for (int j = 0; j + 1 < n; ++j) {
    const S xv = x[j];
    const S gv = g[j];
    acc0[j] = std::fma(g[j + 1], xv, acc0[j]);
    acc1[j] = std::fma(gv, xv, acc1[j]);
    acc2[j] = std::fma(gv, x[j + 1], acc2[j]);
  }
  if (n > 0) acc1[n - 1] = std::fma(g[n - 1], x[n - 1], acc1[n - 1]);
}

// Deterministic fold of a row accumulator: sequential double accumulation.
template <class S>
inline S fold_row(const S* acc, int n) {
  double s = 0.0;
  for (int j = 0; j < n; ++j) s += static_cast<double>(acc[j]);
  return static_cast<S>(s);
}

template <class S>
inline S fold_lanes(const S* acc) {
  S s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  S s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
  S s45 = (acc[8] + acc[9]) + (acc[10] + acc[11]);
  S s67 = (acc[12] + acc[13]) + (acc[14] + acc[15]);
  return (s01 + s23) + (s45 + s67);
}

template <class S>
inline void deinterleave(const S* __restrict row, int W, S* __restrict even,
                         S* __restrict odd) {
  const int ne = (W + 1) / 2;
  for (int j = 0; j < ne; ++j) even[j] = row[2 * j];
  for (int j = 0; j < W / 2; ++j) odd[j] = row[2 * j + 1];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward.
// ---------------------------------------------------------------------------

template <class S>
void forward(const S* x, const S* w, const S* b, S* y, int Ci, int Co, int D,
             int H, int W, int stride, std::vector<S>& scratch) {
  require(stride == 1 || stride == 2, "conv stride must be 1 or 2");
  const int Do = out_dim(D, stride), Ho = out_dim(H, stride),
            Wo = out_dim(W, stride);
  const std::size_t iplane = static_cast<std::size_t>(D) * H * W;
  const std::size_t oplane = static_cast<std::size_t>(Do) * Ho * Wo;
  scratch.resize(static_cast<std::size_t>(Wo));
  S* acc = scratch.data();
  for (int co = 0; co < Co; ++co) {
    S* yc = y + static_cast<std::size_t>(co) * oplane;
    const S bias = b ? b[co] : S(0);
    for (int zo = 0; zo < Do; ++zo) {
      const int zc = stride * zo;
      for (int yo = 0; yo < Ho; ++yo) {
        const int yc2 = stride * yo;
        for (int i = 0; i < Wo; ++i) acc[i] = bias;
        for (int ci = 0; ci < Ci; ++ci) {
          const S* xc = x + static_cast<std::size_t>(ci) * iplane;
          const S* wk = w + (static_cast<std::size_t>(co) * Ci + ci) * 27;
          for (int dz = 0; dz < 3; ++dz) {
            const int zz = zc + dz - 1;
            if (zz < 0 || zz >= D) continue;
            for (int dy = 0; dy < 3; ++dy) {
              const int yy = yc2 + dy - 1;
              if (yy < 0 || yy >= H) continue;
              const S* row = xc + (static_cast<std::size_t>(zz) * H + yy) * W;
              const S* wp = wk + (dz * 3 + dy) * 3;
              if (stride == 1)
                detail::row_taps_s1(acc, row, wp[0], wp[1], wp[2], W);
              else
                detail::row_taps_s2(acc, row, wp[0], wp[1], wp[2], W, Wo);
            }
          }
        }
        S* out = yc + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
        for (int i = 0; i < Wo; ++i) out[i] = acc[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Input gradient.
// ---------------------------------------------------------------------------

// Stride 1: the adjoint of a zero-padded conv is the conv of the output
// gradient with the channel-swapped, spatially flipped kernel.
template <class S>
void input_grad_s1(const S* gy, const S* w, S* gx_add, int Ci, int Co, int D,
                   int H, int W, std::vector<S>& scratch, std::vector<S>& wflip,
                   std::vector<S>& tmp) {
  wflip.resize(static_cast<std::size_t>(Ci) * Co * 27);
  for (int ci = 0; ci < Ci; ++ci)
    for (int co = 0; co < Co; ++co)
      for (int k = 0; k < 27; ++k)
        wflip[(static_cast<std::size_t>(ci) * Co + co) * 27 + k] =
            w[(static_cast<std::size_t>(co) * Ci + ci) * 27 + (26 - k)];
  // Convolve into a temp then add, so callers can accumulate.
  tmp.resize(static_cast<std::size_t>(Ci) * D * H * W);
  forward(gy, wflip.data(), static_cast<const S*>(nullptr), tmp.data(), Co, Ci,
          D, H, W, 1, scratch);
  const std::size_t n = tmp.size();
  for (std::size_t i = 0; i < n; ++i) gx_add[i] += tmp[i];
}

// Stride 2: gather formulation. For input voxel (z,y,x) the contributing
// output voxels satisfy 2*o + d - 1 = coordinate, which fixes the tap parity
// per axis; rows are assembled in even/odd column buffers so the inner loops
// stay contiguous.
template <class S>
void input_grad_s2(const S* gy, const S* w, S* gx_add, int Ci, int Co, int D,
                   int H, int W, std::vector<S>& scratch) {
  const int Do = out_dim(D, 2), Ho = out_dim(H, 2), Wo = out_dim(W, 2);
  const std::size_t iplane = static_cast<std::size_t>(D) * H * W;
  const std::size_t oplane = static_cast<std::size_t>(Do) * Ho * Wo;
  const int ne = (W + 1) / 2, no = W / 2;
  scratch.resize(static_cast<std::size_t>(ne + no));
  S* buf_e = scratch.data();
  S* buf_o = scratch.data() + ne;
  for (int ci = 0; ci < Ci; ++ci) {
    S* dst = gx_add + static_cast<std::size_t>(ci) * iplane;
    for (int z = 0; z < D; ++z) {
      // taps dz with (z + 1 - dz) even and zo in range
      int dz_set[2], ndz = 0;
      for (int dz = (z % 2 == 0) ? 1 : 0; dz < 3; dz += 2) {
        const int zo = (z + 1 - dz) / 2;
        if (zo >= 0 && zo < Do) dz_set[ndz++] = dz;
      }
      for (int y = 0; y < H; ++y) {
        int dy_set[2], ndy = 0;
        for (int dy = (y % 2 == 0) ? 1 : 0; dy < 3; dy += 2) {
          const int yo = (y + 1 - dy) / 2;
          if (yo >= 0 && yo < Ho) dy_set[ndy++] = dy;
        }
        for (int j = 0; j < ne; ++j) buf_e[j] = S(0);
        for (int j = 0; j < no; ++j) buf_o[j] = S(0);
        for (int co = 0; co < Co; ++co) {
          const S* gsrc = gy + static_cast<std::size_t>(co) * oplane;
          const S* wk = w + (static_cast<std::size_t>(co) * Ci + ci) * 27;
          for (int a = 0; a < ndz; ++a) {
            const int dz = dz_set[a];
            const int zo = (z + 1 - dz) / 2;
            for (int bidx = 0; bidx < ndy; ++bidx) {
              const int dy = dy_set[bidx];
              const int yo = (y + 1 - dy) / 2;
              const S* grow =
                  gsrc + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
              const S* wp = wk + (dz * 3 + dy) * 3;
              // even columns x=2j: tap dx=1, xo=j
              const S we = wp[1];
              const int je = ne < Wo ? ne : Wo;
              for (int j = 0; j < je; ++j)
                buf_e[j] = std::fma(we, grow[j], buf_e[j]);
              // odd columns x=2j+1: dx=0 -> xo=j+1, dx=2 -> xo=j
              const S w0 = wp[0], w2 = wp[2];
              const int j2 = no < Wo ? no : Wo;
              for (int j = 0; j < j2; ++j)
                buf_o[j] = std::fma(w2, grow[j], buf_o[j]);
              for (int j = 0; j + 1 < Wo && j < no; ++j)
                buf_o[j] = std::fma(w0, grow[j + 1], buf_o[j]);
            }
          }
        }
        S* drow = dst + (static_cast<std::size_t>(z) * H + y) * W;
        for (int j = 0; j < ne; ++j) drow[2 * j] += buf_e[j];
        for (int j = 0; j < no; ++j) drow[2 * j + 1] += buf_o[j];
      }
    }
  }
}

template <class S>
void input_grad(const S* gy, const S* w, S* gx_add, int Ci, int Co, int D,
                int H, int W, int stride, std::vector<S>& scratch,
                std::vector<S>& wflip, std::vector<S>& tmp) {
  if (stride == 1)
    input_grad_s1(gy, w, gx_add, Ci, Co, D, H, W, scratch, wflip, tmp);
  else
    input_grad_s2(gy, w, gx_add, Ci, Co, D, H, W, scratch);
}

// ---------------------------------------------------------------------------
// Weight and bias gradients.
// ---------------------------------------------------------------------------

template <class S>
void weight_grad(const S* x, const S* gy, S* gw_add, S* gb_add, int Ci, int Co,
                 int D, int H, int W, int stride, std::vector<S>& scratch) {
  const int Do = out_dim(D, stride), Ho = out_dim(H, stride),
            Wo = out_dim(W, stride);
  const std::size_t iplane = static_cast<std::size_t>(D) * H * W;
  const std::size_t oplane = static_cast<std::size_t>(Do) * Ho * Wo;
  const int ne = (W + 1) / 2, no = W / 2;
  scratch.resize(static_cast<std::size_t>(stride == 2 ? ne + no : 3 * W));

  for (int co = 0; co < Co; ++co) {
    const S* gc = gy + static_cast<std::size_t>(co) * oplane;
    if (gb_add) {
      double s = 0.0;
      for (std::size_t i = 0; i < oplane; ++i) s += static_cast<double>(gc[i]);
      gb_add[co] += static_cast<S>(s);
    }
    for (int ci = 0; ci < Ci; ++ci) {
      const S* xc = x + static_cast<std::size_t>(ci) * iplane;
      S* gw = gw_add + (static_cast<std::size_t>(co) * Ci + ci) * 27;
      for (int dz = 0; dz < 3; ++dz)
        for (int dy = 0; dy < 3; ++dy) {
          S* gwp = gw + (dz * 3 + dy) * 3;
          if (stride == 1) {
            S* a0 = scratch.data();
            S* a1 = a0 + W;
            S* a2 = a1 + W;
            std::fill(scratch.begin(), scratch.end(), S(0));
            for (int zo = 0; zo < Do; ++zo) {
              const int zz = zo + dz - 1;
              if (zz < 0 || zz >= D) continue;
              for (int yo = 0; yo < Ho; ++yo) {
                const int yy = yo + dy - 1;
                if (yy < 0 || yy >= H) continue;
                const S* grow =
                    gc + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
                const S* xrow =
                    xc + (static_cast<std::size_t>(zz) * H + yy) * W;
                detail::wgrad_row_s1(a0, a1, a2, grow, xrow, W);
              }
            }
            gwp[0] += detail::fold_row(a0, W);
            gwp[1] += detail::fold_row(a1, W);
            gwp[2] += detail::fold_row(a2, W);
            continue;
          }
          S acc0[detail::kLanes] = {};
          S acc1[detail::kLanes] = {};
          S acc2[detail::kLanes] = {};
          for (int zo = 0; zo < Do; ++zo) {
            const int zz = stride * zo + dz - 1;
            if (zz < 0 || zz >= D) continue;
            for (int yo = 0; yo < Ho; ++yo) {
              const int yy = stride * yo + dy - 1;
              if (yy < 0 || yy >= H) continue;
              const S* grow =
                  gc + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
              const S* xrow =
                  xc + (static_cast<std::size_t>(zz) * H + yy) * W;
              S* xe = scratch.data();
              S* xo = scratch.data() + ne;
              detail::deinterleave(xrow, W, xe, xo);
              // dx=1 hits even columns; dx=0 hits odd columns shifted left;
              // dx=2 hits odd columns.
              detail::dot_acc(acc1, grow, xe, ne < Wo ? ne : Wo);
              detail::dot_acc(acc0, grow + 1,
                              xo, (no < Wo - 1 ? no : Wo - 1));
              detail::dot_acc(acc2, grow, xo, no < Wo ? no : Wo);
            }
          }
          gwp[0] += detail::fold_lanes(acc0);
          gwp[1] += detail::fold_lanes(acc1);
          gwp[2] += detail::fold_lanes(acc2);
        }
    }
  }
}

}  // namespace uvi::conv
