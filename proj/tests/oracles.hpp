#pragma once
// Independent brute-force reference implementations used to generate expected
// values in the tests. Everything here is written directly from the operation
// definitions in plain double-precision loops, deliberately sharing no code
// with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct Vol {
  int c = 0, d = 0, h = 0, w = 0;
  std::vector<double> v;

  Vol() = default;
  Vol(int c_, int d_, int h_, int w_, double fill = 0.0)
      : c(c_), d(d_), h(h_), w(w_),
        v(static_cast<std::size_t>(c_) * d_ * h_ * w_, fill) {}
  double& at(int ci, int z, int y, int x) {
    return v[((static_cast<std::size_t>(ci) * d + z) * h + y) * w + x];
  }
  double at(int ci, int z, int y, int x) const {
    return v[((static_cast<std::size_t>(ci) * d + z) * h + y) * w + x];
  }
  std::size_t n() const { return v.size(); }
};

// Zero-padded 3x3x3 convolution, stride 1 or 2.
// wts indexed [co][ci][dz][dy][dx] flattened.
inline Vol conv3d(const Vol& x, const std::vector<double>& wts,
                  const std::vector<double>& bias, int co_n, int stride) {
  const int Do = stride == 1 ? x.d : (x.d + 1) / 2;
  const int Ho = stride == 1 ? x.h : (x.h + 1) / 2;
  const int Wo = stride == 1 ? x.w : (x.w + 1) / 2;
  Vol y(co_n, Do, Ho, Wo);
  for (int co = 0; co < co_n; ++co)
    for (int zo = 0; zo < Do; ++zo)
      for (int yo = 0; yo < Ho; ++yo)
        for (int xo = 0; xo < Wo; ++xo) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (int ci = 0; ci < x.c; ++ci)
            for (int dz = 0; dz < 3; ++dz)
              for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) {
                  const int z = stride * zo + dz - 1;
                  const int yy = stride * yo + dy - 1;
                  const int xx = stride * xo + dx - 1;
                  if (z < 0 || z >= x.d || yy < 0 || yy >= x.h || xx < 0 ||
                      xx >= x.w)
                    continue;
                  const double wv =
                      wts[(((static_cast<std::size_t>(co) * x.c + ci) * 3 + dz) *
                               3 +
                           dy) *
                              3 +
                          dx];
                  acc += wv * x.at(ci, z, yy, xx);
                }
          y.at(co, zo, yo, xo) = acc;
        }
  return y;
}

// Trilinear backward warp with border-clamped sampling.
// field channels: displacement along depth, height, width (voxels).
inline Vol warp(const Vol& vol, const Vol& field) {
  Vol out(vol.c, vol.d, vol.h, vol.w);
  for (int z = 0; z < vol.d; ++z)
    for (int y = 0; y < vol.h; ++y)
      for (int x = 0; x < vol.w; ++x) {
        double pz = z + field.at(0, z, y, x);
        double py = y + field.at(1, z, y, x);
        double px = x + field.at(2, z, y, x);
        pz = std::clamp(pz, 0.0, static_cast<double>(vol.d - 1));
        py = std::clamp(py, 0.0, static_cast<double>(vol.h - 1));
        px = std::clamp(px, 0.0, static_cast<double>(vol.w - 1));
        const int z0 = static_cast<int>(std::floor(pz));
        const int y0 = static_cast<int>(std::floor(py));
        const int x0 = static_cast<int>(std::floor(px));
        const int z1 = std::min(z0 + 1, vol.d - 1);
        const int y1 = std::min(y0 + 1, vol.h - 1);
        const int x1 = std::min(x0 + 1, vol.w - 1);
        const double tz = pz - z0, ty = py - y0, tx = px - x0;
        for (int c = 0; c < vol.c; ++c) {
          double acc = 0.0;
          acc += (1 - tz) * (1 - ty) * (1 - tx) * vol.at(c, z0, y0, x0);
          acc += (1 - tz) * (1 - ty) * tx * vol.at(c, z0, y0, x1);
          acc += (1 - tz) * ty * (1 - tx) * vol.at(c, z0, y1, x0);
          acc += (1 - tz) * ty * tx * vol.at(c, z0, y1, x1);
          acc += tz * (1 - ty) * (1 - tx) * vol.at(c, z1, y0, x0);
          acc += tz * (1 - ty) * tx * vol.at(c, z1, y0, x1);
          acc += tz * ty * (1 - tx) * vol.at(c, z1, y1, x0);
          acc += tz * ty * tx * vol.at(c, z1, y1, x1);
          out.at(c, z, y, x) = acc;
        }
      }
  return out;
}

// Trilinear resize with half-pixel centers and clamping.
inline Vol resize(const Vol& vol, int d2, int h2, int w2) {
  Vol out(vol.c, d2, h2, w2);
  for (int z = 0; z < d2; ++z)
    for (int y = 0; y < h2; ++y)
      for (int x = 0; x < w2; ++x) {
        double pz = (z + 0.5) * vol.d / d2 - 0.5;
        double py = (y + 0.5) * vol.h / h2 - 0.5;
        double px = (x + 0.5) * vol.w / w2 - 0.5;
        pz = std::clamp(pz, 0.0, static_cast<double>(vol.d - 1));
        py = std::clamp(py, 0.0, static_cast<double>(vol.h - 1));
        px = std::clamp(px, 0.0, static_cast<double>(vol.w - 1));
        const int z0 = static_cast<int>(std::floor(pz));
        const int y0 = static_cast<int>(std::floor(py));
        const int x0 = static_cast<int>(std::floor(px));
        const int z1 = std::min(z0 + 1, vol.d - 1);
        const int y1 = std::min(y0 + 1, vol.h - 1);
        const int x1 = std::min(x0 + 1, vol.w - 1);
        const double tz = pz - z0, ty = py - y0, tx = px - x0;
        for (int c = 0; c < vol.c; ++c) {
          double acc = 0.0;
          acc += (1 - tz) * (1 - ty) * (1 - tx) * vol.at(c, z0, y0, x0);
          acc += (1 - tz) * (1 - ty) * tx * vol.at(c, z0, y0, x1);
          acc += (1 - tz) * ty * (1 - tx) * vol.at(c, z0, y1, x0);
          acc += (1 - tz) * ty * tx * vol.at(c, z0, y1, x1);
          acc += tz * (1 - ty) * (1 - tx) * vol.at(c, z1, y0, x0);
          acc += tz * (1 - ty) * tx * vol.at(c, z1, y0, x1);
          acc += tz * ty * (1 - tx) * vol.at(c, z1, y1, x0);
          acc += tz * ty * tx * vol.at(c, z1, y1, x1);
          out.at(c, z, y, x) = acc;
        }
      }
  return out;
}

// Border-clipped window sum.
inline Vol box_sum(const Vol& x, int win) {
  const int r = win / 2;
  Vol out(x.c, x.d, x.h, x.w);
  for (int c = 0; c < x.c; ++c)
    for (int z = 0; z < x.d; ++z)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          double acc = 0.0;
          for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int z2 = z + dz, y2 = y + dy, x2 = xx + dx;
                if (z2 < 0 || z2 >= x.d || y2 < 0 || y2 >= x.h || x2 < 0 ||
                    x2 >= x.w)
                  continue;
                acc += x.at(c, z2, y2, x2);
              }
          out.at(c, z, y, xx) = acc;
        }
  return out;
}

// Mean windowed correlation coefficient from central sums with floor `delta`.
inline double ncc_local(const Vol& a, const Vol& b, int win, double delta) {
  const int r = win / 2;
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < a.c; ++c)
    for (int z = 0; z < a.d; ++z)
      for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          int n = 0;
          for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int z2 = z + dz, y2 = y + dy, x2 = x + dx;
                if (z2 < 0 || z2 >= a.d || y2 < 0 || y2 >= a.h || x2 < 0 ||
                    x2 >= a.w)
                  continue;
                const double va = a.at(c, z2, y2, x2);
                const double vb = b.at(c, z2, y2, x2);
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
                ++n;
              }
          const double cov = sab - sa * sb / n;
          const double var_a = saa - sa * sa / n;
          const double var_b = sbb - sb * sb / n;
          total += cov / std::sqrt((var_a + delta) * (var_b + delta));
          ++count;
        }
  return total / static_cast<double>(count);
}

inline double charbonnier(const Vol& a, const Vol& b, double eps) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.n(); ++i) {
    const double d = a.v[i] - b.v[i];
    acc += std::sqrt(d * d + eps * eps);
  }
  return acc / static_cast<double>(a.n());
}

// Mean squared forward difference averaged over the three axes; field is a
// 3-channel Vol.
inline double smoothness(const Vol& f) {
  double total = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    double acc = 0.0;
    std::size_t cnt = 0;
    const int dlim = f.d - (axis == 0 ? 1 : 0);
    const int hlim = f.h - (axis == 1 ? 1 : 0);
    const int wlim = f.w - (axis == 2 ? 1 : 0);
    for (int c = 0; c < f.c; ++c)
      for (int z = 0; z < dlim; ++z)
        for (int y = 0; y < hlim; ++y)
          for (int x = 0; x < wlim; ++x) {
            const double d =
                f.at(c, z + (axis == 0), y + (axis == 1), x + (axis == 2)) -
                f.at(c, z, y, x);
            acc += d * d;
            ++cnt;
          }
    total += acc / static_cast<double>(cnt);
  }
  return total / 3.0;
}

inline double dice_loss(const Vol& p, const Vol& t, double delta) {
  double mean = 0.0;
  const std::size_t plane = static_cast<std::size_t>(p.d) * p.h * p.w;
  for (int c = 0; c < p.c; ++c) {
    double inter = 0, sp = 0, st = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double pv = p.v[c * plane + i];
      const double tv = t.v[c * plane + i];
      inter += pv * tv;
      sp += pv;
      st += tv;
    }
    mean += (2.0 * inter + delta) / (sp + st + delta);
  }
  return 1.0 - mean / p.c;
}

inline double psnr(const Vol& gt, const Vol& pred) {
  double mse = 0.0;
  for (std::size_t i = 0; i < gt.n(); ++i) {
    const double d = gt.v[i] - pred.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(gt.n());
  if (mse == 0.0) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

inline double pearson(const Vol& a, const Vol& b) {
  const double n = static_cast<double>(a.n());
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.n(); ++i) {
    sa += a.v[i];
    sb += b.v[i];
    saa += a.v[i] * a.v[i];
    sbb += b.v[i] * b.v[i];
    sab += a.v[i] * b.v[i];
  }
  return (sab - sa * sb / n) /
         std::sqrt((saa - sa * sa / n) * (sbb - sb * sb / n));
}

// Mean SSIM with a uniform cubic window (border-clipped), L=1.
inline double ssim3d(const Vol& a, const Vol& b, int win, double k1,
                     double k2) {
  const int r = win / 2;
  const double c1 = k1 * k1, c2 = k2 * k2;
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < a.c; ++c)
    for (int z = 0; z < a.d; ++z)
      for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          int n = 0;
          for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int z2 = z + dz, y2 = y + dy, x2 = x + dx;
                if (z2 < 0 || z2 >= a.d || y2 < 0 || y2 >= a.h || x2 < 0 ||
                    x2 >= a.w)
                  continue;
                const double va = a.at(c, z2, y2, x2);
                const double vb = b.at(c, z2, y2, x2);
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
                ++n;
              }
          const double mu_a = sa / n, mu_b = sb / n;
          const double va = saa / n - mu_a * mu_a;
          const double vb = sbb / n - mu_b * mu_b;
          const double cov = sab / n - mu_a * mu_b;
          total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

}  // namespace oracle
