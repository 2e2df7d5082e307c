#pragma once
// Reverse-mode autodiff over Tensor<S>. A Tape owns the graph nodes for one
// forward/backward pass; creation order doubles as the topological order, so
// backward() is a single reverse sweep. Single threaded, fixed accumulation
// order everywhere: two runs over the same inputs produce identical bits.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/conv_kernels.hpp"
#include "uvi/tensor.hpp"

namespace uvi {

template <class S>
class Tape;

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool needs_grad = false;
  bool grad_live = false;
  std::function<void()> backprop;

  void ensure_grad() {
    if (!grad_live) {
      grad = Tensor<S>::like(value);
      grad_live = true;
    }
  }
  // Adds g into this node's gradient buffer (allocating it on first use).
  void accumulate(const Tensor<S>& g) {
    ensure_grad();
    const std::size_t n = grad.numel();
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

template <class S>
class Tape {
 public:
  using N = Node<S>;

  N* leaf(Tensor<S> v, bool needs_grad) {
    N* n = make();
    n->value = std::move(v);
    n->needs_grad = needs_grad;
    return n;
  }

  N* constant(Tensor<S> v) { return leaf(std::move(v), false); }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    order_.clear();
  }

  // Reverse sweep from `root` (must be scalar-valued).
  void backward(N* root) {
    require(root->value.numel() == 1, "backward root must be scalar");
    root->ensure_grad();
    root->grad[0] = S(1);
    // Find root position; it is almost always the last node.
    std::size_t pos = order_.size();
    while (pos > 0 && order_[pos - 1] != root) --pos;
    require(pos > 0, "backward root not on this tape");
    for (std::size_t i = pos; i-- > 0;) {
      N* n = order_[i];
      if (n->grad_live && n->backprop) n->backprop();
    }
  }

  // ---- primitive ops -------------------------------------------------------

  N* conv3d(N* x, N* w, N* b, int stride) {
    const Tensor<S>& xv = x->value;
    const Tensor<S>& wv = w->value;
    require(xv.rank() == 4 && wv.rank() == 5, "conv3d: bad ranks");
    const int Ci = xv.dim(0), D = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0);
    require(wv.dim(1) == Ci && wv.dim(2) == 3 && wv.dim(3) == 3 && wv.dim(4) == 3,
            "conv3d: weight shape mismatch");
    if (b) require(b->value.rank() == 1 && b->value.dim(0) == Co,
                   "conv3d: bias shape mismatch");
    const int Do = conv::out_dim(D, stride), Ho = conv::out_dim(H, stride),
              Wo = conv::out_dim(W, stride);
    N* out = make();
    out->value = Tensor<S>({Co, Do, Ho, Wo});
    conv::forward(xv.data(), wv.data(), b ? b->value.data() : nullptr,
                  out->value.data(), Ci, Co, D, H, W, stride, scratch_);
    out->needs_grad = x->needs_grad || w->needs_grad || (b && b->needs_grad);
    if (out->needs_grad) {
      Tape* t = this;
      out->backprop = [t, x, w, b, out, Ci, Co, D, H, W, stride]() {
        const S* gy = out->grad.data();
        if (x->needs_grad) {
          x->ensure_grad();
          conv::input_grad(gy, w->value.data(), x->grad.data(), Ci, Co, D, H,
                           W, stride, t->scratch_, t->wflip_, t->tmp_);
        }
        if (w->needs_grad || (b && b->needs_grad)) {
          w->ensure_grad();
          S* gb = nullptr;
          if (b && b->needs_grad) {
            b->ensure_grad();
            gb = b->grad.data();
          }
          conv::weight_grad(x->value.data(), gy, w->grad.data(), gb, Ci, Co, D,
                            H, W, stride, t->scratch_);
        }
      };
    }
    return out;
  }

  N* leaky_relu(N* x, S alpha) {
    N* out = unary(x);
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const S v = x->value[i];
      out->value[i] = v > S(0) ? v : alpha * v;
    }
    if (out->needs_grad)
      out->backprop = [x, out, alpha, n]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          x->grad[i] += out->grad[i] * (x->value[i] > S(0) ? S(1) : alpha);
      };
    return out;
  }

  // Nearest-neighbor x2 upsampling of a rank-4 tensor.
  N* upsample2(N* x) {
    const Tensor<S>& xv = x->value;
    require(xv.rank() == 4, "upsample2: rank-4 input required");
    const int C = xv.dim(0), D = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    N* out = make();
    out->value = Tensor<S>({C, 2 * D, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < 2 * D; ++z)
        for (int y = 0; y < 2 * H; ++y) {
          const S* src = xv.data() + ((static_cast<std::size_t>(c) * D + z / 2) * H +
                                      y / 2) * W;
          S* dst = out->value.data() +
                   ((static_cast<std::size_t>(c) * 2 * D + z) * 2 * H + y) * 2 * W;
          for (int xx = 0; xx < W; ++xx) {
            dst[2 * xx] = src[xx];
            dst[2 * xx + 1] = src[xx];
          }
        }
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, C, D, H, W]() {
        x->ensure_grad();
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
              S* dst = x->grad.data() +
                       ((static_cast<std::size_t>(c) * D + z / 2) * H + y / 2) * W;
              const S* g = out->grad.data() +
                           ((static_cast<std::size_t>(c) * 2 * D + z) * 2 * H + y) *
                               2 * W;
              for (int xx = 0; xx < W; ++xx)
                dst[xx] += g[2 * xx] + g[2 * xx + 1];
            }
      };
    return out;
  }

  N* concat(N* a, N* b) {
    const Tensor<S>&av = a->value, &bv = b->value;
    require(av.rank() == 4 && bv.rank() == 4 && av.dim(1) == bv.dim(1) &&
                av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
            "concat: spatial dims must match");
    const int Ca = av.dim(0), Cb = bv.dim(0);
    N* out = make();
    out->value = Tensor<S>({Ca + Cb, av.dim(1), av.dim(2), av.dim(3)});
    const std::size_t na = av.numel(), nb = bv.numel();
    for (std::size_t i = 0; i < na; ++i) out->value[i] = av[i];
    for (std::size_t i = 0; i < nb; ++i) out->value[na + i] = bv[i];
    out->needs_grad = a->needs_grad || b->needs_grad;
    if (out->needs_grad)
      out->backprop = [a, b, out, na, nb]() {
        if (a->needs_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < na; ++i) a->grad[i] += out->grad[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < nb; ++i) b->grad[i] += out->grad[na + i];
        }
      };
    return out;
  }

  // Backward warp by a displacement field (channels: dz, dy, dx in voxels).
  // Sampling is trilinear with coordinates clamped to the volume border; a
  // zero displacement reproduces the input bit-for-bit.
  N* warp(N* vol, N* field) {
    const Tensor<S>& v = vol->value;
    const Tensor<S>& f = field->value;
    require(v.rank() == 4 && f.rank() == 4 && f.dim(0) == 3 &&
                f.dim(1) == v.dim(1) && f.dim(2) == v.dim(2) &&
                f.dim(3) == v.dim(3),
            "warp: field must be (3, D, H, W) matching the volume");
    const int C = v.dim(0), D = v.dim(1), H = v.dim(2), W = v.dim(3);
    N* out = make();
    out->value = Tensor<S>({C, D, H, W});
    const std::size_t plane = v.plane();
    const S* fz = f.channel(0);
    const S* fy = f.channel(1);
    const S* fx = f.channel(2);
    std::size_t p = 0;
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x, ++p) {
          S pz = S(z) + fz[p], py = S(y) + fy[p], px = S(x) + fx[p];
          // NaN displacements poison the output voxel instead of producing
          // an out-of-range index (infinities are handled by the clamps)
          if (pz != pz || py != py || px != px) {
            for (int c = 0; c < C; ++c)
              out->value[c * plane + p] = std::numeric_limits<S>::quiet_NaN();
            continue;
          }
          if (pz < S(0)) pz = S(0);
          if (pz > S(D - 1)) pz = S(D - 1);
          if (py < S(0)) py = S(0);
          if (py > S(H - 1)) py = S(H - 1);
          if (px < S(0)) px = S(0);
          if (px > S(W - 1)) px = S(W - 1);
          const int z0 = static_cast<int>(pz), y0 = static_cast<int>(py),
                    x0 = static_cast<int>(px);
          const int z1 = z0 + 1 < D ? z0 + 1 : D - 1;
          const int y1 = y0 + 1 < H ? y0 + 1 : H - 1;
          const int x1 = x0 + 1 < W ? x0 + 1 : W - 1;
          const S tz = pz - S(z0), ty = py - S(y0), tx = px - S(x0);
          for (int c = 0; c < C; ++c) {
            const S* vc = v.data() + c * plane;
            const std::size_t b00 = (static_cast<std::size_t>(z0) * H + y0) * W;
            const std::size_t b01 = (static_cast<std::size_t>(z0) * H + y1) * W;
            const std::size_t b10 = (static_cast<std::size_t>(z1) * H + y0) * W;
            const std::size_t b11 = (static_cast<std::size_t>(z1) * H + y1) * W;
            const S c00 = vc[b00 + x0] + tx * (vc[b00 + x1] - vc[b00 + x0]);
            const S c01 = vc[b01 + x0] + tx * (vc[b01 + x1] - vc[b01 + x0]);
            const S c10 = vc[b10 + x0] + tx * (vc[b10 + x1] - vc[b10 + x0]);
            const S c11 = vc[b11 + x0] + tx * (vc[b11 + x1] - vc[b11 + x0]);
            const S c0 = c00 + ty * (c01 - c00);
            const S c1 = c10 + ty * (c11 - c10);
            out->value[c * plane + p] = c0 + tz * (c1 - c0);
          }
        }
    out->needs_grad = vol->needs_grad || field->needs_grad;
    if (out->needs_grad)
      out->backprop = [vol, field, out, C, D, H, W, plane]() {
        const Tensor<S>& v = vol->value;
        const Tensor<S>& f = field->value;
        const S* fz = f.channel(0);
        const S* fy = f.channel(1);
        const S* fx = f.channel(2);
        const bool gv = vol->needs_grad, gf = field->needs_grad;
        if (gv) vol->ensure_grad();
        if (gf) field->ensure_grad();
        std::size_t p = 0;
        for (int z = 0; z < D; ++z)
          for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x, ++p) {
              S pz = S(z) + fz[p], py = S(y) + fy[p], px = S(x) + fx[p];
              if (pz != pz || py != py || px != px) continue;
              const bool cz = pz < S(0) || pz > S(D - 1);
              const bool cy = py < S(0) || py > S(H - 1);
              const bool cx = px < S(0) || px > S(W - 1);
              if (pz < S(0)) pz = S(0);
              if (pz > S(D - 1)) pz = S(D - 1);
              if (py < S(0)) py = S(0);
              if (py > S(H - 1)) py = S(H - 1);
              if (px < S(0)) px = S(0);
              if (px > S(W - 1)) px = S(W - 1);
              const int z0 = static_cast<int>(pz), y0 = static_cast<int>(py),
                        x0 = static_cast<int>(px);
              const int z1 = z0 + 1 < D ? z0 + 1 : D - 1;
              const int y1 = y0 + 1 < H ? y0 + 1 : H - 1;
              const int x1 = x0 + 1 < W ? x0 + 1 : W - 1;
              const S tz = pz - S(z0), ty = py - S(y0), tx = px - S(x0);
              const S wz0 = S(1) - tz, wy0 = S(1) - ty, wx0 = S(1) - tx;
              S dz_acc = S(0), dy_acc = S(0), dx_acc = S(0);
              for (int c = 0; c < C; ++c) {
                const S g = out->grad[c * plane + p];
                if (g == S(0)) continue;
                const S* vc = v.data() + c * plane;
                const std::size_t b00 = (static_cast<std::size_t>(z0) * H + y0) * W;
                const std::size_t b01 = (static_cast<std::size_t>(z0) * H + y1) * W;
                const std::size_t b10 = (static_cast<std::size_t>(z1) * H + y0) * W;
                const std::size_t b11 = (static_cast<std::size_t>(z1) * H + y1) * W;
                if (gv) {
                  S* gvc = vol->grad.data() + c * plane;
                  gvc[b00 + x0] += g * wz0 * wy0 * wx0;
                  gvc[b00 + x1] += g * wz0 * wy0 * tx;
                  gvc[b01 + x0] += g * wz0 * ty * wx0;
                  gvc[b01 + x1] += g * wz0 * ty * tx;
                  gvc[b10 + x0] += g * tz * wy0 * wx0;
                  gvc[b10 + x1] += g * tz * wy0 * tx;
                  gvc[b11 + x0] += g * tz * ty * wx0;
                  gvc[b11 + x1] += g * tz * ty * tx;
                }
                if (gf) {
                  const S dx00 = vc[b00 + x1] - vc[b00 + x0];
                  const S dx01 = vc[b01 + x1] - vc[b01 + x0];
                  const S dx10 = vc[b10 + x1] - vc[b10 + x0];
                  const S dx11 = vc[b11 + x1] - vc[b11 + x0];
                  const S c00 = vc[b00 + x0] + tx * dx00;
                  const S c01 = vc[b01 + x0] + tx * dx01;
                  const S c10 = vc[b10 + x0] + tx * dx10;
                  const S c11 = vc[b11 + x0] + tx * dx11;
                  dx_acc += g * (wz0 * (wy0 * dx00 + ty * dx01) +
                                 tz * (wy0 * dx10 + ty * dx11));
                  dy_acc += g * (wz0 * (c01 - c00) + tz * (c11 - c10));
                  dz_acc += g * ((c10 + ty * (c11 - c10)) -
                                 (c00 + ty * (c01 - c00)));
                }
              }
              if (gf) {
                S* gfz = field->grad.channel(0);
                S* gfy = field->grad.channel(1);
                S* gfx = field->grad.channel(2);
                if (!cz) gfz[p] += dz_acc;
                if (!cy) gfy[p] += dy_acc;
                if (!cx) gfx[p] += dx_acc;
              }
            }
      };
    return out;
  }

  // Trilinear resize with half-pixel centers and clamped sampling.
  N* resize(N* x, int d2, int h2, int w2) {
    const Tensor<S>& v = x->value;
    require(v.rank() == 4, "resize: rank-4 input required");
    require(d2 > 0 && h2 > 0 && w2 > 0, "resize: target dims must be positive");
    const int C = v.dim(0), D = v.dim(1), H = v.dim(2), W = v.dim(3);
    N* out = make();
    out->value = Tensor<S>({C, d2, h2, w2});
    const double sz = static_cast<double>(D) / d2;
    const double sy = static_cast<double>(H) / h2;
    const double sx = static_cast<double>(W) / w2;
    const std::size_t plane = v.plane();
    const std::size_t oplane = static_cast<std::size_t>(d2) * h2 * w2;
    std::size_t p = 0;
    for (int z = 0; z < d2; ++z)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx, ++p) {
          double pz = (z + 0.5) * sz - 0.5;
          double py = (y + 0.5) * sy - 0.5;
          double px = (xx + 0.5) * sx - 0.5;
          if (pz < 0) pz = 0;
          if (pz > D - 1) pz = D - 1;
          if (py < 0) py = 0;
          if (py > H - 1) py = H - 1;
          if (px < 0) px = 0;
          if (px > W - 1) px = W - 1;
          const int z0 = static_cast<int>(pz), y0 = static_cast<int>(py),
                    x0 = static_cast<int>(px);
          const int z1 = z0 + 1 < D ? z0 + 1 : D - 1;
          const int y1 = y0 + 1 < H ? y0 + 1 : H - 1;
          const int x1 = x0 + 1 < W ? x0 + 1 : W - 1;
          const S tz = static_cast<S>(pz - z0), ty = static_cast<S>(py - y0),
                  tx = static_cast<S>(px - x0);
          for (int c = 0; c < C; ++c) {
            const S* vc = v.data() + c * plane;
            const std::size_t b00 = (static_cast<std::size_t>(z0) * H + y0) * W;
            const std::size_t b01 = (static_cast<std::size_t>(z0) * H + y1) * W;
            const std::size_t b10 = (static_cast<std::size_t>(z1) * H + y0) * W;
            const std::size_t b11 = (static_cast<std::size_t>(z1) * H + y1) * W;
            const S c00 = vc[b00 + x0] + tx * (vc[b00 + x1] - vc[b00 + x0]);
            const S c01 = vc[b01 + x0] + tx * (vc[b01 + x1] - vc[b01 + x0]);
            const S c10 = vc[b10 + x0] + tx * (vc[b10 + x1] - vc[b10 + x0]);
            const S c11 = vc[b11 + x0] + tx * (vc[b11 + x1] - vc[b11 + x0]);
            const S c0 = c00 + ty * (c01 - c00);
            const S c1 = c10 + ty * (c11 - c10);
            out->value[c * oplane + p] = c0 + tz * (c1 - c0);
          }
        }
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, C, D, H, W, d2, h2, w2, plane, oplane, sz, sy,
                       sx]() {
        x->ensure_grad();
        std::size_t p = 0;
        for (int z = 0; z < d2; ++z)
          for (int y = 0; y < h2; ++y)
            for (int xx = 0; xx < w2; ++xx, ++p) {
              double pz = (z + 0.5) * sz - 0.5;
              double py = (y + 0.5) * sy - 0.5;
              double px = (xx + 0.5) * sx - 0.5;
              if (pz < 0) pz = 0;
              if (pz > D - 1) pz = D - 1;
              if (py < 0) py = 0;
              if (py > H - 1) py = H - 1;
              if (px < 0) px = 0;
              if (px > W - 1) px = W - 1;
              const int z0 = static_cast<int>(pz), y0 = static_cast<int>(py),
                        x0 = static_cast<int>(px);
              const int z1 = z0 + 1 < D ? z0 + 1 : D - 1;
              const int y1 = y0 + 1 < H ? y0 + 1 : H - 1;
              const int x1 = x0 + 1 < W ? x0 + 1 : W - 1;
              const S tz = static_cast<S>(pz - z0), ty = static_cast<S>(py - y0),
                      tx = static_cast<S>(px - x0);
              const S wz0 = S(1) - tz, wy0 = S(1) - ty, wx0 = S(1) - tx;
              for (int c = 0; c < C; ++c) {
                const S g = out->grad[c * oplane + p];
                if (g == S(0)) continue;
                S* gc = x->grad.data() + c * plane;
                const std::size_t b00 = (static_cast<std::size_t>(z0) * H + y0) * W;
                const std::size_t b01 = (static_cast<std::size_t>(z0) * H + y1) * W;
                const std::size_t b10 = (static_cast<std::size_t>(z1) * H + y0) * W;
                const std::size_t b11 = (static_cast<std::size_t>(z1) * H + y1) * W;
                gc[b00 + x0] += g * wz0 * wy0 * wx0;
                gc[b00 + x1] += g * wz0 * wy0 * tx;
                gc[b01 + x0] += g * wz0 * ty * wx0;
                gc[b01 + x1] += g * wz0 * ty * tx;
                gc[b10 + x0] += g * tz * wy0 * wx0;
                gc[b10 + x1] += g * tz * wy0 * tx;
                gc[b11 + x0] += g * tz * ty * wx0;
                gc[b11 + x1] += g * tz * ty * tx;
              }
            }
      };
    return out;
  }

  N* scale(N* x, S k) {
    N* out = unary(x);
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = k * x->value[i];
    if (out->needs_grad)
      out->backprop = [x, out, k, n]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x->grad[i] += k * out->grad[i];
      };
    return out;
  }

  N* add_scalar(N* x, S k) {
    N* out = unary(x);
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = x->value[i] + k;
    if (out->needs_grad)
      out->backprop = [x, out, n]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
      };
    return out;
  }

  N* add(N* a, N* b) {
    N* out = binary(a, b);
    const std::size_t n = a->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
    if (out->needs_grad)
      out->backprop = [a, b, out, n]() {
        if (a->needs_grad) a->accumulate(out->grad);
        if (b->needs_grad) b->accumulate(out->grad);
      };
    return out;
  }

  N* sub(N* a, N* b) {
    N* out = binary(a, b);
    const std::size_t n = a->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] - b->value[i];
    if (out->needs_grad)
      out->backprop = [a, b, out, n]() {
        if (a->needs_grad) a->accumulate(out->grad);
        if (b->needs_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) b->grad[i] -= out->grad[i];
        }
      };
    return out;
  }

  N* mul(N* a, N* b) {
    N* out = binary(a, b);
    const std::size_t n = a->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] * b->value[i];
    if (out->needs_grad)
      out->backprop = [a, b, out, n]() {
        if (a->needs_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            a->grad[i] += out->grad[i] * b->value[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            b->grad[i] += out->grad[i] * a->value[i];
        }
      };
    return out;
  }

  N* div(N* a, N* b) {
    N* out = binary(a, b);
    const std::size_t n = a->value.numel();
    for (std::size_t i = 0; i < n; ++i) out->value[i] = a->value[i] / b->value[i];
    if (out->needs_grad)
      out->backprop = [a, b, out, n]() {
        if (a->needs_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            a->grad[i] += out->grad[i] / b->value[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            b->grad[i] -= out->grad[i] * out->value[i] / b->value[i];
        }
      };
    return out;
  }

  N* sqrt_op(N* x) {
    N* out = unary(x);
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i)
      out->value[i] = std::sqrt(x->value[i]);
    if (out->needs_grad)
      out->backprop = [x, out, n]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          x->grad[i] += out->grad[i] / (S(2) * out->value[i]);
      };
    return out;
  }

  N* abs_op(N* x) {
    N* out = unary(x);
    const std::size_t n = x->value.numel();
    for (std::size_t i = 0; i < n; ++i)
      out->value[i] = x->value[i] < S(0) ? -x->value[i] : x->value[i];
    if (out->needs_grad)
      out->backprop = [x, out, n]() {
        x->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const S v = x->value[i];
          if (v > S(0))
            x->grad[i] += out->grad[i];
          else if (v < S(0))
            x->grad[i] -= out->grad[i];
        }
      };
    return out;
  }

  // wa*a + wb*b with the two products formed separately before one add, so
  // fuse(a,b,wa,wb) and fuse(b,a,wb,wa) are bitwise identical.
  N* fuse(N* a, N* b, S wa, S wb) {
    N* out = binary(a, b);
    const std::size_t n = a->value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const S pa = wa * a->value[i];
      const S pb = wb * b->value[i];
      out->value[i] = pa + pb;
    }
    if (out->needs_grad)
      out->backprop = [a, b, out, wa, wb, n]() {
        if (a->needs_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) a->grad[i] += wa * out->grad[i];
        }
        if (b->needs_grad) {
          b->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) b->grad[i] += wb * out->grad[i];
        }
      };
    return out;
  }

  // Sliding-window sum with zero padding: out[p] = sum of x over the
  // win^3 neighborhood of p clipped to the tensor. Self-adjoint, so the
  // backward pass is the same filter applied to the gradient.
  N* box_sum(N* x, int win) {
    require(win >= 1 && win % 2 == 1, "box_sum: window must be odd and >= 1");
    const Tensor<S>& v = x->value;
    require(v.rank() == 4, "box_sum: rank-4 input required");
    N* out = make();
    out->value = Tensor<S>::like(v);
    box_filter(v, out->value, win);
    out->needs_grad = x->needs_grad;
    if (out->needs_grad) {
      Tape* t = this;
      out->backprop = [t, x, out, win]() {
        x->ensure_grad();
        Tensor<S> tmp = Tensor<S>::like(out->grad);
        t->box_filter(out->grad, tmp, win);
        const std::size_t n = tmp.numel();
        for (std::size_t i = 0; i < n; ++i) x->grad[i] += tmp[i];
      };
    }
    return out;
  }

  // Forward difference along an axis (1=depth, 2=height, 3=width); the output
  // is one element shorter along that axis.
  N* axis_diff(N* x, int axis) {
    const Tensor<S>& v = x->value;
    require(v.rank() == 4 && axis >= 1 && axis <= 3, "axis_diff: bad axis");
    int nd[4] = {v.dim(0), v.dim(1), v.dim(2), v.dim(3)};
    require(nd[axis] >= 2, "axis_diff: axis too short");
    nd[axis] -= 1;
    N* out = make();
    out->value = Tensor<S>({nd[0], nd[1], nd[2], nd[3]});
    const std::size_t step = stride_of(v, axis);
    const int C = v.dim(0), D2 = nd[1], H2 = nd[2], W2 = nd[3];
    const int H = v.dim(2), W = v.dim(3);
    std::size_t q = 0;
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < D2; ++z)
        for (int y = 0; y < H2; ++y)
          for (int xx = 0; xx < W2; ++xx, ++q) {
            const std::size_t p =
                ((static_cast<std::size_t>(c) * v.dim(1) + z) * H + y) * W + xx;
            out->value[q] = v[p + step] - v[p];
          }
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, step, C, D2, H2, W2, H, W]() {
        x->ensure_grad();
        const int Din = x->value.dim(1);
        std::size_t q = 0;
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < D2; ++z)
            for (int y = 0; y < H2; ++y)
              for (int xx = 0; xx < W2; ++xx, ++q) {
                const std::size_t p =
                    ((static_cast<std::size_t>(c) * Din + z) * H + y) * W + xx;
                const S g = out->grad[q];
                x->grad[p + step] += g;
                x->grad[p] -= g;
              }
      };
    return out;
  }

  // Central difference along an axis, zero at the borders, scaled by 1/2.
  N* central_diff(N* x, int axis) {
    const Tensor<S>& v = x->value;
    require(v.rank() == 4 && axis >= 1 && axis <= 3, "central_diff: bad axis");
    N* out = make();
    out->value = Tensor<S>::like(v);
    const std::size_t step = stride_of(v, axis);
    const int C = v.dim(0), D = v.dim(1), H = v.dim(2), W = v.dim(3);
    const int ext[4] = {C, D, H, W};
    const int n_axis = ext[axis];
    std::size_t p = 0;
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx, ++p) {
            const int coord = axis == 1 ? z : (axis == 2 ? y : xx);
            out->value[p] = (coord > 0 && coord + 1 < n_axis)
                                ? S(0.5) * (v[p + step] - v[p - step])
                                : S(0);
          }
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, step, C, D, H, W, axis, n_axis]() {
        x->ensure_grad();
        std::size_t p = 0;
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
              for (int xx = 0; xx < W; ++xx, ++p) {
                const int coord = axis == 1 ? z : (axis == 2 ? y : xx);
                if (coord > 0 && coord + 1 < n_axis) {
                  const S g = S(0.5) * out->grad[p];
                  x->grad[p + step] += g;
                  x->grad[p - step] -= g;
                }
              }
      };
    return out;
  }

  // Mean over all elements; the sum is accumulated in double.
  N* mean_all(N* x) {
    const std::size_t n = x->value.numel();
    require(n > 0, "mean_all: empty tensor");
    N* out = make();
    out->value = Tensor<S>::scalar(
        static_cast<S>(x->value.sum() / static_cast<double>(n)));
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, n]() {
        x->ensure_grad();
        const S g = out->grad[0] * static_cast<S>(1.0 / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) x->grad[i] += g;
      };
    return out;
  }

  // Per-channel sums of a rank-4 tensor -> rank-1 [C].
  N* channel_sums(N* x) {
    const Tensor<S>& v = x->value;
    require(v.rank() == 4, "channel_sums: rank-4 input required");
    const int C = v.dim(0);
    const std::size_t plane = v.plane();
    N* out = make();
    out->value = Tensor<S>({C});
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      const S* vc = v.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(vc[i]);
      out->value[c] = static_cast<S>(s);
    }
    out->needs_grad = x->needs_grad;
    if (out->needs_grad)
      out->backprop = [x, out, C, plane]() {
        x->ensure_grad();
        for (int c = 0; c < C; ++c) {
          const S g = out->grad[c];
          S* gc = x->grad.data() + c * plane;
          for (std::size_t i = 0; i < plane; ++i) gc[i] += g;
        }
      };
    return out;
  }

  // mean_i sqrt((a_i - b_i)^2 + eps^2): the robust penalty used by the image
  // term. The forward value is computed in double so that identical inputs
  // give back exactly eps after the final rounding.
  N* charbonnier_mean(N* a, N* b, S eps) {
    require(a->value.same_shape(b->value), "charbonnier: shape mismatch");
    const std::size_t n = a->value.numel();
    require(n > 0, "charbonnier: empty tensor");
    N* out = make();
    auto r = std::make_shared<Tensor<S>>(Tensor<S>::like(a->value));
    const double e2 = static_cast<double>(eps) * static_cast<double>(eps);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(a->value[i]) -
                       static_cast<double>(b->value[i]);
      const double ri = std::sqrt(d * d + e2);
      (*r)[i] = static_cast<S>(ri);
      acc += ri;
    }
    out->value = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
    out->needs_grad = a->needs_grad || b->needs_grad;
    if (out->needs_grad)
      out->backprop = [a, b, out, r, n]() {
        const S g = out->grad[0] * static_cast<S>(1.0 / static_cast<double>(n));
        if (a->needs_grad) a->ensure_grad();
        if (b->needs_grad) b->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const S d = a->value[i] - b->value[i];
          const S gi = g * d / (*r)[i];
          if (a->needs_grad) a->grad[i] += gi;
          if (b->needs_grad) b->grad[i] -= gi;
        }
      };
    return out;
  }

 private:
  N* make() {
    nodes_.push_back(std::make_unique<N>());
    order_.push_back(nodes_.back().get());
    return nodes_.back().get();
  }

  N* unary(N* x) {
    N* out = make();
    out->value = Tensor<S>::like(x->value);
    out->needs_grad = x->needs_grad;
    return out;
  }

  N* binary(N* a, N* b) {
    require(a->value.same_shape(b->value), "elementwise op: shape mismatch");
    N* out = make();
    out->value = Tensor<S>::like(a->value);
    out->needs_grad = a->needs_grad || b->needs_grad;
    return out;
  }

  static std::size_t stride_of(const Tensor<S>& v, int axis) {
    if (axis == 3) return 1;
    if (axis == 2) return static_cast<std::size_t>(v.dim(3));
    return static_cast<std::size_t>(v.dim(2)) * static_cast<std::size_t>(v.dim(3));
  }

  // Separable box filter; per-line prefix sums are built in double for
  // stability, and evaluation order is fixed.
  void box_filter(const Tensor<S>& in, Tensor<S>& out, int win) {
    const int r = win / 2;
    const int C = in.dim(0), D = in.dim(1), H = in.dim(2), W = in.dim(3);
    Tensor<S> tmp = Tensor<S>::like(in);
    // axis order: W, H, D; ping-pong so the result lands in `out`.
    line_pass(in, out, C, D, H, W, 3, r);
    line_pass(out, tmp, C, D, H, W, 2, r);
    line_pass(tmp, out, C, D, H, W, 1, r);
  }

  void line_pass(const Tensor<S>& in, Tensor<S>& out, int C, int D, int H,
                 int W, int axis, int r) {
    const std::size_t step = axis == 3 ? 1
                             : axis == 2 ? static_cast<std::size_t>(W)
                                         : static_cast<std::size_t>(H) * W;
    const int n = axis == 3 ? W : axis == 2 ? H : D;
    prefix_.resize(static_cast<std::size_t>(n) + 1);
    // iterate all lines along `axis`
    const int n1 = axis == 1 ? H : D;          // outer spatial loop
    const int n2 = axis == 3 ? H : W;          // inner spatial loop
    for (int c = 0; c < C; ++c) {
      const std::size_t base_c = static_cast<std::size_t>(c) * in.plane();
      for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
          std::size_t base;
          if (axis == 3)
            base = base_c + (static_cast<std::size_t>(i) * H + j) * W;
          else if (axis == 2)
            base = base_c + static_cast<std::size_t>(i) * H * W + j;
          else
            base = base_c + static_cast<std::size_t>(i) * W + j;
          prefix_[0] = 0.0;
          for (int k = 0; k < n; ++k)
            prefix_[static_cast<std::size_t>(k) + 1] =
                prefix_[static_cast<std::size_t>(k)] +
                static_cast<double>(in[base + static_cast<std::size_t>(k) * step]);
          for (int k = 0; k < n; ++k) {
            const int lo = k - r < 0 ? 0 : k - r;
            const int hi = k + r + 1 > n ? n : k + r + 1;
            out[base + static_cast<std::size_t>(k) * step] =
                static_cast<S>(prefix_[static_cast<std::size_t>(hi)] -
                               prefix_[static_cast<std::size_t>(lo)]);
          }
        }
    }
  }

  std::vector<std::unique_ptr<N>> nodes_;
  std::vector<N*> order_;
  std::vector<S> scratch_;
  std::vector<S> wflip_;
  std::vector<S> tmp_;
  std::vector<double> prefix_;
};

}  // namespace uvi
