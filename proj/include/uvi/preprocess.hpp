#pragma once
// Intensity preprocessing for CT/MRI volumes (windowing, centering, bed
// removal, resizing, min-max scaling) plus an analytic phantom generator
// producing ground-truth frames, fields and labels for any t in [-0.5, 1.5].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/rng.hpp"
#include "uvi/volume.hpp"

namespace uvi {

enum class Modality { cardiac_mri, lung_ct, phantom };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::cardiac_mri: return "cardiac_mri";
    case Modality::lung_ct: return "lung_ct";
    case Modality::phantom: return "phantom";
  }
  throw ContractViolation("unknown modality");
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "cardiac_mri") return Modality::cardiac_mri;
  if (s == "lung_ct") return Modality::lung_ct;
  if (s == "phantom") return Modality::phantom;
  throw ContractViolation(cat("unknown modality '", s, "'"));
}

struct PreprocessSpec {
  Modality modality = Modality::lung_ct;
  double window_low = -1400.0;  // HU
  double window_high = 200.0;   // HU
  double bed_threshold = -500.0;  // HU, applied before centering
  int target_d = 128, target_h = 128, target_w = 128;
  bool normalize = true;

  void validate() const {
    require(window_low < window_high, "preprocess: window.low must be < window.high");
    require(target_d > 0 && target_h > 0 && target_w > 0,
            "preprocess: target shape must be positive");
    require(target_d % 16 == 0 && target_h % 16 == 0 && target_w % 16 == 0,
            "preprocess: target dims must be divisible by 16");
  }
};

// ---------------------------------------------------------------------------
// Elementwise intensity ops
// ---------------------------------------------------------------------------

template <class S>
Volume<S> window_clamp(const Volume<S>& v, double low, double high) {
  require(low < high, "window_clamp: low must be < high");
  Volume<S> out(Tensor<S>::like(v.data));
  out.spacing = v.spacing;
  const S lo = static_cast<S>(low), hi = static_cast<S>(high);
  const std::size_t n = v.data.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.data[i] = std::clamp(v.data[i], lo, hi);
  return out;
}

// Shifts intensities so the window midpoint sits at zero; keeps bed removal's
// binarization threshold meaningful after the shift (callers translate it by
// the same midpoint).
template <class S>
Volume<S> center_intensity(const Volume<S>& v, double low, double high) {
  Volume<S> out(Tensor<S>::like(v.data));
  out.spacing = v.spacing;
  const S mid = static_cast<S>((low + high) / 2.0);
  const std::size_t n = v.data.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = v.data[i] - mid;
  return out;
}

template <class S>
Volume<S> minmax_normalize(const Volume<S>& v) {
  const std::size_t n = v.data.numel();
  require(n > 0, "minmax_normalize: empty volume");
  S lo = v.data[0], hi = v.data[0];
  for (std::size_t i = 1; i < n; ++i) {
    lo = std::min(lo, v.data[i]);
    hi = std::max(hi, v.data[i]);
  }
  if (!(lo < hi))
    throw ContractViolation("minmax_normalize: constant volume has no range");
  Volume<S> out(Tensor<S>::like(v.data));
  out.spacing = v.spacing;
  const S span = hi - lo;
  for (std::size_t i = 0; i < n; ++i) out.data[i] = (v.data[i] - lo) / span;
  return out;
}

// ---------------------------------------------------------------------------
// Bed removal: binarize -> open (erode x2, dilate x2, 3^3) -> largest
// 6-connected component -> fill internal holes -> mask the volume.
// ---------------------------------------------------------------------------

namespace prep_detail {

using Mask = std::vector<std::uint8_t>;  // flat (D,H,W), 1 = body

inline std::size_t flat(int d, int h, int w, int y, int z, int x) {
  (void)d;
  return (static_cast<std::size_t>(y) * h + z) * w + x;
}

// 3^3 erosion: survives only if every neighbour in the cube is set; voxels
// outside the volume count as background, so the mask shrinks at the border.
inline Mask erode3(const Mask& m, int d, int h, int w) {
  Mask out(m.size(), 0);
  for (int y = 0; y < d; ++y)
    for (int z = 0; z < h; ++z)
      for (int x = 0; x < w; ++x) {
        if (y == 0 || z == 0 || x == 0 || y == d - 1 || z == h - 1 || x == w - 1)
          continue;
        bool all = true;
        for (int dy = -1; dy <= 1 && all; ++dy)
          for (int dz = -1; dz <= 1 && all; ++dz)
            for (int dx = -1; dx <= 1; ++dx)
              if (!m[flat(d, h, w, y + dy, z + dz, x + dx)]) {
                all = false;
                break;
              }
        if (all) out[flat(d, h, w, y, z, x)] = 1;
      }
  return out;
}

inline Mask dilate3(const Mask& m, int d, int h, int w) {
  Mask out(m.size(), 0);
  for (int y = 0; y < d; ++y)
    for (int z = 0; z < h; ++z)
      for (int x = 0; x < w; ++x) {
        if (!m[flat(d, h, w, y, z, x)]) continue;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, zz = z + dz, xx = x + dx;
              if (yy < 0 || zz < 0 || xx < 0 || yy >= d || zz >= h || xx >= w)
                continue;
              out[flat(d, h, w, yy, zz, xx)] = 1;
            }
      }
  return out;
}

// Flood fill over 6-neighbours; labels every voxel reachable from `seeds`
// whose mask value equals `value`.
inline void flood6(const Mask& m, int d, int h, int w, std::uint8_t value,
                   std::vector<std::size_t>& stack, Mask& visited) {
  const std::array<std::array<int, 3>, 6> nb{{{1, 0, 0},
                                              {-1, 0, 0},
                                              {0, 1, 0},
                                              {0, -1, 0},
                                              {0, 0, 1},
                                              {0, 0, -1}}};
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % w);
    const int z = static_cast<int>((i / w) % h);
    const int y = static_cast<int>(i / (static_cast<std::size_t>(w) * h));
    for (const auto& o : nb) {
      const int yy = y + o[0], zz = z + o[1], xx = x + o[2];
      if (yy < 0 || zz < 0 || xx < 0 || yy >= d || zz >= h || xx >= w) continue;
      const std::size_t j = flat(d, h, w, yy, zz, xx);
      if (visited[j] || m[j] != value) continue;
      visited[j] = 1;
      stack.push_back(j);
    }
  }
}

inline Mask largest_component6(const Mask& m, int d, int h, int w) {
  Mask visited(m.size(), 0);
  Mask best;
  std::size_t best_count = 0;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m[s] || visited[s]) continue;
    Mask comp(m.size(), 0);
    visited[s] = 1;
    std::vector<std::size_t> work(1, s);
    comp[s] = 1;
    std::size_t count = 1;
    while (!work.empty()) {
      const std::size_t i = work.back();
      work.pop_back();
      const int x = static_cast<int>(i % w);
      const int z = static_cast<int>((i / w) % h);
      const int y = static_cast<int>(i / (static_cast<std::size_t>(w) * h));
      const std::array<std::array<int, 3>, 6> nb{{{1, 0, 0},
                                                  {-1, 0, 0},
                                                  {0, 1, 0},
                                                  {0, -1, 0},
                                                  {0, 0, 1},
                                                  {0, 0, -1}}};
      for (const auto& o : nb) {
        const int yy = y + o[0], zz = z + o[1], xx = x + o[2];
        if (yy < 0 || zz < 0 || xx < 0 || yy >= d || zz >= h || xx >= w)
          continue;
        const std::size_t j = flat(d, h, w, yy, zz, xx);
        if (visited[j] || !m[j]) continue;
        visited[j] = 1;
        comp[j] = 1;
        ++count;
        work.push_back(j);
      }
    }
    if (count > best_count) {
      best_count = count;
      best = std::move(comp);
    }
  }
  if (best_count == 0) best.assign(m.size(), 0);
  return best;
}

// Fills cavities: background voxels not 6-connected to the volume boundary
// become foreground.
inline Mask fill_holes6(const Mask& m, int d, int h, int w) {
  Mask outside(m.size(), 0);
  std::vector<std::size_t> stack;
  auto seed = [&](int y, int z, int x) {
    const std::size_t i = flat(d, h, w, y, z, x);
    if (!m[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back(i);
    }
  };
  for (int y = 0; y < d; ++y)
    for (int z = 0; z < h; ++z) {
      seed(y, z, 0);
      seed(y, z, w - 1);
    }
  for (int y = 0; y < d; ++y)
    for (int x = 0; x < w; ++x) {
      seed(y, 0, x);
      seed(y, h - 1, x);
    }
  for (int z = 0; z < h; ++z)
    for (int x = 0; x < w; ++x) {
      seed(0, z, x);
      seed(d - 1, z, x);
    }
  flood6(m, d, h, w, 0, stack, outside);
  Mask out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = outside[i] ? 0 : 1;
  return out;
}

}  // namespace prep_detail

template <class S>
struct BedRemovalResult {
  Volume<S> volume;                      // masked volume, outside = fill
  std::vector<std::uint8_t> mask;        // flat (D,H,W), 1 = body
};

template <class S>
BedRemovalResult<S> bed_removal(const Volume<S>& v, double threshold,
                                double fill) {
  require(v.channels() == 1, "bed_removal: single-channel volumes only");
  const int d = v.depth(), h = v.height(), w = v.width();
  const std::size_t n = static_cast<std::size_t>(d) * h * w;
  prep_detail::Mask bin(n, 0);
  const S thr = static_cast<S>(threshold);
  for (std::size_t i = 0; i < n; ++i) bin[i] = v.data[i] > thr ? 1 : 0;

  prep_detail::Mask m = prep_detail::erode3(bin, d, h, w);
  m = prep_detail::erode3(m, d, h, w);
  m = prep_detail::dilate3(m, d, h, w);
  m = prep_detail::dilate3(m, d, h, w);
  m = prep_detail::largest_component6(m, d, h, w);
  bool any = false;
  for (std::size_t i = 0; i < n && !any; ++i) any = m[i] != 0;
  if (!any)
    throw ContractViolation("bed_removal: mask is empty (no body found above threshold)");
  m = prep_detail::fill_holes6(m, d, h, w);

  BedRemovalResult<S> out;
  out.volume = Volume<S>(Tensor<S>::like(v.data));
  out.volume.spacing = v.spacing;
  const S fv = static_cast<S>(fill);
  for (std::size_t i = 0; i < n; ++i)
    out.volume.data[i] = m[i] ? v.data[i] : fv;
  out.mask = std::move(m);
  return out;
}

// ---------------------------------------------------------------------------
// Pair pipeline
// ---------------------------------------------------------------------------

template <class S>
Volume<S> preprocess_volume(const Volume<S>& raw, const PreprocessSpec& spec) {
  spec.validate();
  switch (spec.modality) {
    case Modality::lung_ct: {
      Volume<S> v = window_clamp(raw, spec.window_low, spec.window_high);
      v = center_intensity(v, spec.window_low, spec.window_high);
      const double mid = (spec.window_low + spec.window_high) / 2.0;
      v = bed_removal(v, spec.bed_threshold - mid, spec.window_low - mid).volume;
      v = resize_volume(v, spec.target_d, spec.target_h, spec.target_w);
      return spec.normalize ? minmax_normalize(v) : v;
    }
    case Modality::cardiac_mri: {
      Volume<S> v = resize_volume(raw, spec.target_d, spec.target_h, spec.target_w);
      return spec.normalize ? minmax_normalize(v) : v;
    }
    case Modality::phantom:
      return spec.normalize ? minmax_normalize(raw) : raw;
  }
  throw ContractViolation("unknown modality");
}

template <class S>
std::pair<Volume<S>, Volume<S>> preprocess_pair(const Volume<S>& raw0,
                                                const Volume<S>& raw1,
                                                const PreprocessSpec& spec) {
  return {preprocess_volume(raw0, spec), preprocess_volume(raw1, spec)};
}

// ---------------------------------------------------------------------------
// Analytic phantoms.  Every kind is built as a base scene observed through a
// time-dependent backward displacement: frame(t)(p) = scene(p + field(t)(p)),
// so the rendered frames and the returned fields agree with warp() exactly
// (up to trilinear interpolation of the rendered grid).
// ---------------------------------------------------------------------------

enum class PhantomKind { translating_sphere, expanding_sphere, sinusoidal_deformation };

inline std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::translating_sphere: return "translating_sphere";
    case PhantomKind::expanding_sphere: return "expanding_sphere";
    case PhantomKind::sinusoidal_deformation: return "sinusoidal_deformation";
  }
  throw ContractViolation("unknown phantom kind");
}

inline PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "translating_sphere") return PhantomKind::translating_sphere;
  if (s == "expanding_sphere") return PhantomKind::expanding_sphere;
  if (s == "sinusoidal_deformation") return PhantomKind::sinusoidal_deformation;
  throw ContractViolation(cat("unknown phantom kind '", s, "'"));
}

struct PhantomSpec {
  PhantomKind kind = PhantomKind::translating_sphere;
  int d = 32, h = 32, w = 32;
  double amplitude = 3.0;   // voxels of motion over t in [0,1]
  double noise_sigma = 0.0; // additive Gaussian noise on the endpoint frames
  std::uint64_t seed = 1;

  void validate() const {
    require(d >= 16 && h >= 16 && w >= 16, "phantom: dims must be >= 16");
    require(noise_sigma >= 0.0, "phantom: noise_sigma must be >= 0");
    require(amplitude >= 0.0, "phantom: amplitude must be >= 0");
    const double r = radius();
    // farthest the object surface can sit from the volume centre over the
    // whole reachable range t in [-0.5, 1.5]
    double reach = r;
    switch (kind) {
      case PhantomKind::translating_sphere:
        reach = r + amplitude;  // trajectory is centred at t = 0.5
        break;
      case PhantomKind::expanding_sphere:
        reach = r + 1.5 * amplitude;
        require(r - 0.5 * amplitude >= 2.0,
                "phantom: sphere would shrink away before t = -0.5");
        break;
      case PhantomKind::sinusoidal_deformation:
        reach = r + amplitude * 1.7320508075688772;  // |d| <= amplitude*sqrt(3)
        break;
    }
    require(min_extent() / 2.0 - edge_halfwidth() - reach >= 2.0,
            "phantom: amplitude too large, object would come within 2 voxels "
            "of the border");
  }

  double min_extent() const {
    return static_cast<double>(std::min(d, std::min(h, w)));
  }
  double radius() const { return 0.22 * min_extent(); }
  static double edge_halfwidth() { return 1.0; }  // cosine ramp spans 2 voxels
};

namespace prep_detail {

// Smooth edge profile: 1 deep inside, 0 far outside, cosine ramp of total
// width 2*edge_halfwidth across the boundary (trilinear-friendly, no alias).
inline double edge_profile(double signed_inside, double halfwidth) {
  const double s = signed_inside / halfwidth;
  if (s >= 1.0) return 1.0;
  if (s <= -1.0) return 0.0;
  return 0.5 * (1.0 + std::sin(0.5 * 3.14159265358979323846 * s));
}

struct PhantomGeometry {
  double cy, cz, cx;     // sphere centre at t = 0
  double uy, uz, ux;     // unit translation direction
  double r0;
  PhantomSpec spec;

  explicit PhantomGeometry(const PhantomSpec& s) : spec(s) {
    spec.validate();
    r0 = s.radius();
    // Unit vector with nonzero motion along every axis.
    uy = 1.0 / 3.0, uz = 2.0 / 3.0, ux = 2.0 / 3.0;
    // Centre the trajectory: at t = 0.5 the sphere sits mid-volume, so the
    // excursion over [-0.5, 1.5] stays symmetric.
    const double my = (s.d - 1) / 2.0, mz = (s.h - 1) / 2.0, mx = (s.w - 1) / 2.0;
    cy = my - 0.5 * s.amplitude * uy;
    cz = mz - 0.5 * s.amplitude * uz;
    cx = mx - 0.5 * s.amplitude * ux;
  }

  // Backward displacement (frame(t) samples the base scene at p + disp).
  void displacement(double t, double y, double z, double x, double& dy,
                    double& dz, double& dx) const {
    switch (spec.kind) {
      case PhantomKind::translating_sphere:
        dy = -t * spec.amplitude * uy;
        dz = -t * spec.amplitude * uz;
        dx = -t * spec.amplitude * ux;
        return;
      case PhantomKind::expanding_sphere: {
        const double k = (r0 + t * spec.amplitude) / r0;
        const double f = 1.0 / k - 1.0;
        dy = (y - cy) * f;
        dz = (z - cz) * f;
        dx = (x - cx) * f;
        return;
      }
      case PhantomKind::sinusoidal_deformation: {
        const double tau = 2.0 * 3.14159265358979323846;
        const double py = tau * y / spec.d, pz = tau * z / spec.h,
                     px = tau * x / spec.w;
        dy = t * spec.amplitude * std::sin(pz) * std::cos(px);
        dz = t * spec.amplitude * std::sin(px) * std::cos(py);
        dx = t * spec.amplitude * std::sin(py) * std::cos(pz);
        return;
      }
    }
    throw ContractViolation("unknown phantom kind");
  }

  // Base scene: a bright sphere over a dark floor.
  double scene(double y, double z, double x) const {
    const double dist = std::sqrt((y - cy) * (y - cy) + (z - cz) * (z - cz) +
                                  (x - cx) * (x - cx));
    const double body =
        edge_profile(r0 - dist, PhantomSpec::edge_halfwidth());
    return 0.1 + 0.8 * body;
  }

  double sample(double t, double y, double z, double x) const {
    double dy, dz, dx;
    displacement(t, y, z, x, dy, dz, dx);
    return scene(y + dy, z + dz, x + dx);
  }

  // Foreground probability of the same moving sphere (for label plumbing).
  double label_fg(double t, double y, double z, double x) const {
    double dy, dz, dx;
    displacement(t, y, z, x, dy, dz, dx);
    const double yy = y + dy, zz = z + dz, xx = x + dx;
    const double dist = std::sqrt((yy - cy) * (yy - cy) + (zz - cz) * (zz - cz) +
                                  (xx - cx) * (xx - cx));
    return edge_profile(r0 - dist, PhantomSpec::edge_halfwidth());
  }
};

}  // namespace prep_detail

// Noiseless analytic frame at any t in [-0.5, 1.5].
template <class S = float>
Volume<S> phantom_frame(const PhantomSpec& spec, double t) {
  require(t >= -0.5 && t <= 1.5, "phantom_frame: t outside [-0.5, 1.5]");
  prep_detail::PhantomGeometry g(spec);
  Volume<S> out(1, spec.d, spec.h, spec.w);
  std::size_t i = 0;
  for (int y = 0; y < spec.d; ++y)
    for (int z = 0; z < spec.h; ++z)
      for (int x = 0; x < spec.w; ++x, ++i)
        out.data[i] = static_cast<S>(g.sample(t, y, z, x));
  return out;
}

// Ground-truth backward displacement taking frame 0 onto frame t:
// warp(phantom_frame(spec, 0), phantom_field(spec, t)) ~ phantom_frame(spec, t).
template <class S = float>
DisplacementField<S> phantom_field(const PhantomSpec& spec, double t) {
  require(t >= -0.5 && t <= 1.5, "phantom_field: t outside [-0.5, 1.5]");
  prep_detail::PhantomGeometry g(spec);
  DisplacementField<S> out(spec.d, spec.h, spec.w);
  const std::size_t plane = static_cast<std::size_t>(spec.d) * spec.h * spec.w;
  std::size_t i = 0;
  for (int y = 0; y < spec.d; ++y)
    for (int z = 0; z < spec.h; ++z)
      for (int x = 0; x < spec.w; ++x, ++i) {
        double dy, dz, dx;
        g.displacement(t, y, z, x, dy, dz, dx);
        out.data[i] = static_cast<S>(dy);
        out.data[plane + i] = static_cast<S>(dz);
        out.data[2 * plane + i] = static_cast<S>(dx);
      }
  return out;
}

// Two-channel (background, foreground) soft segmentation of the sphere; the
// channels sum to 1 exactly up to float rounding.
template <class S = float>
Volume<S> phantom_labels(const PhantomSpec& spec, double t) {
  require(t >= -0.5 && t <= 1.5, "phantom_labels: t outside [-0.5, 1.5]");
  prep_detail::PhantomGeometry g(spec);
  Volume<S> out(2, spec.d, spec.h, spec.w);
  const std::size_t plane = static_cast<std::size_t>(spec.d) * spec.h * spec.w;
  std::size_t i = 0;
  for (int y = 0; y < spec.d; ++y)
    for (int z = 0; z < spec.h; ++z)
      for (int x = 0; x < spec.w; ++x, ++i) {
        const S fg = static_cast<S>(g.label_fg(t, y, z, x));
        out.data[i] = S(1) - fg;
        out.data[plane + i] = fg;
      }
  return out;
}

template <class S = float>
struct PhantomPair {
  Volume<S> i0, i1;
};

// Endpoint frames with optional additive Gaussian noise (clamped back into
// [0,1]); the noiseless truth stays available through phantom_frame.
template <class S = float>
PhantomPair<S> phantom_pair(const PhantomSpec& spec) {
  PhantomPair<S> out;
  out.i0 = phantom_frame<S>(spec, 0.0);
  out.i1 = phantom_frame<S>(spec, 1.0);
  if (spec.noise_sigma > 0.0) {
    Rng rng(spec.seed);
    auto add_noise = [&](Volume<S>& v) {
      const std::size_t n = v.data.numel();
      for (std::size_t i = 0; i < n; ++i) {
        const double noisy = static_cast<double>(v.data[i]) +
                             spec.noise_sigma * rng.normal();
        v.data[i] = static_cast<S>(std::clamp(noisy, 0.0, 1.0));
      }
    };
    add_noise(out.i0);
    add_noise(out.i1);
  }
  return out;
}

}  // namespace uvi
