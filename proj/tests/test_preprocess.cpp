#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "helpers.hpp"
#include "uvi/preprocess.hpp"

using F = float;

namespace {

uvi::Volume<F> random_hu_volume(int d, int h, int w, std::uint64_t seed) {
  uvi::Volume<F> v(1, d, h, w);
  uvi::Rng rng(seed);
  testutil::fill_uniform(v.data, rng, -2000.0, 1000.0);
  return v;
}

double vol_max_abs_diff(const uvi::Volume<F>& a, const uvi::Volume<F>& b) {
  REQUIRE(a.data.same_shape(b.data));
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) -
                             static_cast<double>(b.data[i])));
  return m;
}

bool vol_bitwise_equal(const uvi::Volume<F>& a, const uvi::Volume<F>& b) {
  if (!a.data.same_shape(b.data)) return false;
  for (std::size_t i = 0; i < a.data.numel(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

// CT-like scene: air everywhere, a soft-tissue cylinder along y with a small
// air cavity inside, and a thin solid slab (the "bed") floating below it.
struct CtFixture {
  int d = 24, h = 48, w = 48;
  double cz = 20.0, cx = 23.5, r = 10.0;            // cylinder axis and radius
  int bed_z0 = 40, bed_z1 = 41;                     // two-voxel slab
  uvi::Volume<F> raw;

  bool in_cylinder(int z, int x) const {
    const double dz = z - cz, dx = x - cx;
    return dz * dz + dx * dx <= r * r;
  }
  bool in_cavity(int y, int z, int x) const {
    const double dy = y - d / 2.0, dz = z - cz, dx = x - cx;
    return dy * dy + dz * dz + dx * dx <= 3.0 * 3.0;
  }
  bool in_bed(int z, int x) const {
    return z >= bed_z0 && z <= bed_z1 && x >= 4 && x <= w - 5;
  }

  CtFixture() : raw(1, d, h, w, F(-1000)) {
    std::size_t i = 0;
    for (int y = 0; y < d; ++y)
      for (int z = 0; z < h; ++z)
        for (int x = 0; x < w; ++x, ++i) {
          if (in_cavity(y, z, x))
            raw.data[i] = F(-900);
          else if (in_cylinder(z, x))
            raw.data[i] = F(40);
          else if (in_bed(z, x))
            raw.data[i] = F(100);
        }
  }
};

}  // namespace

TEST_CASE("window_clamp pins intensities into the window") {
  auto v = random_hu_volume(6, 7, 8, 11);
  auto c = uvi::window_clamp(v, -1400.0, 200.0);
  for (std::size_t i = 0; i < v.data.numel(); ++i) {
    const F want = std::clamp(v.data[i], F(-1400), F(200));
    CHECK(c.data[i] == want);
  }
  auto twice = uvi::window_clamp(c, -1400.0, 200.0);
  CHECK(vol_bitwise_equal(twice, c));

  uvi::Volume<F> probe(1, 1, 1, 3);
  probe.data[0] = -2000.0f;
  probe.data[1] = 0.0f;
  probe.data[2] = 500.0f;
  auto p = uvi::window_clamp(probe, -1400.0, 200.0);
  CHECK(p.data[0] == -1400.0f);
  CHECK(p.data[1] == 0.0f);
  CHECK(p.data[2] == 200.0f);

  CHECK_THROWS_AS(uvi::window_clamp(v, 5.0, 5.0), uvi::ContractViolation);
}

TEST_CASE("center_intensity moves the window midpoint to zero") {
  auto v = random_hu_volume(5, 6, 7, 12);
  auto c = uvi::center_intensity(v, -1400.0, 200.0);
  for (std::size_t i = 0; i < v.data.numel(); ++i)
    CHECK(c.data[i] == v.data[i] - F(-600));

  uvi::Volume<F> mid(1, 1, 1, 1, F(-600));
  CHECK(uvi::center_intensity(mid, -1400.0, 200.0).data[0] == 0.0f);
}

TEST_CASE("minmax_normalize spans exactly [0, 1]") {
  auto v = random_hu_volume(6, 6, 6, 13);
  auto n = uvi::minmax_normalize(v);
  F lo, hi;
  n.data.minmax(lo, hi);
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);

  F vlo, vhi;
  v.data.minmax(vlo, vhi);
  for (std::size_t i = 0; i < v.data.numel(); ++i) {
    const double want = (v.data[i] - vlo) / (double(vhi) - vlo);
    CHECK(std::abs(n.data[i] - want) <= 1e-6);
  }

  // invariant under positive affine rescale of the input
  uvi::Volume<F> aff(uvi::Tensor<F>::like(v.data));
  for (std::size_t i = 0; i < v.data.numel(); ++i)
    aff.data[i] = 3.0f * v.data[i] + 17.0f;
  CHECK(vol_max_abs_diff(uvi::minmax_normalize(aff), n) <= 1e-5);

  uvi::Volume<F> flat(1, 4, 4, 4, F(2.5));
  CHECK_THROWS_AS(uvi::minmax_normalize(flat), uvi::ContractViolation);
}

TEST_CASE("bed_removal keeps the body, drops the bed, fills cavities") {
  CtFixture fx;
  auto out = uvi::bed_removal(fx.raw, -500.0, -1000.0);

  std::size_t cyl = 0, cyl_kept = 0, bed = 0, bed_kept = 0;
  std::size_t cav = 0, cav_kept = 0;
  std::size_t i = 0;
  for (int y = 0; y < fx.d; ++y)
    for (int z = 0; z < fx.h; ++z)
      for (int x = 0; x < fx.w; ++x, ++i) {
        if (fx.in_cylinder(z, x)) {
          ++cyl;
          cyl_kept += out.mask[i];
          if (fx.in_cavity(y, z, x)) {
            ++cav;
            cav_kept += out.mask[i];
          }
        } else if (fx.in_bed(z, x)) {
          ++bed;
          bed_kept += out.mask[i];
        }
      }
  REQUIRE(cyl > 0);
  REQUIRE(bed > 0);
  REQUIRE(cav > 0);
  CHECK(static_cast<double>(cyl_kept) / cyl >= 0.99);
  CHECK(static_cast<double>(bed_kept) / bed <= 0.01);
  CHECK(cav_kept == cav);  // internal air pocket is part of the body

  // the surviving mask is a single 6-connected piece with no holes
  auto biggest = uvi::prep_detail::largest_component6(out.mask, fx.d, fx.h, fx.w);
  CHECK(biggest == out.mask);
  auto filled = uvi::prep_detail::fill_holes6(out.mask, fx.d, fx.h, fx.w);
  CHECK(filled == out.mask);

  // masked volume: original inside, fill outside
  for (std::size_t j = 0; j < out.mask.size(); ++j) {
    if (out.mask[j])
      CHECK(out.volume.data[j] == fx.raw.data[j]);
    else
      CHECK(out.volume.data[j] == -1000.0f);
  }

  // running it again on its own output changes nothing
  auto again = uvi::bed_removal(out.volume, -500.0, -1000.0);
  CHECK(again.mask == out.mask);
  CHECK(vol_bitwise_equal(again.volume, out.volume));

  uvi::Volume<F> air(1, 20, 20, 20, F(-1000));
  CHECK_THROWS_AS(uvi::bed_removal(air, -500.0, -1000.0),
                  uvi::ContractViolation);
  uvi::Volume<F> two(2, 8, 8, 8, F(0));
  CHECK_THROWS_AS(uvi::bed_removal(two, -500.0, -1000.0),
                  uvi::ContractViolation);
}

TEST_CASE("lung preprocessing lands normalized at the target shape") {
  CtFixture fx;
  uvi::PreprocessSpec spec;
  spec.modality = uvi::Modality::lung_ct;
  spec.target_d = spec.target_h = spec.target_w = 32;

  auto [a, b] = uvi::preprocess_pair(fx.raw, fx.raw, spec);
  CHECK(a.data.channels() == 1);
  CHECK(a.data.depth() == 32);
  CHECK(a.data.height() == 32);
  CHECK(a.data.width() == 32);
  F lo, hi;
  a.data.minmax(lo, hi);
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);
  CHECK(vol_bitwise_equal(a, b));  // same input, same pipeline, same bits

  auto again = uvi::preprocess_volume(fx.raw, spec);
  CHECK(vol_bitwise_equal(again, a));
}

TEST_CASE("mri and phantom preprocessing skip the CT stages") {
  auto raw = random_hu_volume(20, 24, 28, 14);
  uvi::PreprocessSpec spec;
  spec.modality = uvi::Modality::cardiac_mri;
  spec.target_d = spec.target_h = spec.target_w = 16;
  auto v = uvi::preprocess_volume(raw, spec);
  CHECK(v.data.channels() == 1);
  CHECK(v.data.depth() == 16);
  CHECK(v.data.height() == 16);
  CHECK(v.data.width() == 16);
  F lo, hi;
  v.data.minmax(lo, hi);
  CHECK(lo == 0.0f);
  CHECK(hi == 1.0f);
  auto manual = uvi::minmax_normalize(
      uvi::resize_volume(raw, 16, 16, 16));
  CHECK(vol_bitwise_equal(v, manual));

  spec.modality = uvi::Modality::phantom;
  auto p = uvi::preprocess_volume(raw, spec);
  CHECK(vol_bitwise_equal(p, uvi::minmax_normalize(raw)));
  spec.normalize = false;
  CHECK(vol_bitwise_equal(uvi::preprocess_volume(raw, spec), raw));
}

TEST_CASE("preprocess spec validation rejects bad windows and shapes") {
  uvi::PreprocessSpec spec;
  spec.window_low = 200.0;
  spec.window_high = -1400.0;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);

  spec = uvi::PreprocessSpec{};
  spec.target_w = 31;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);
  spec.target_w = -16;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);

  CHECK_NOTHROW(uvi::PreprocessSpec{}.validate());
  CHECK(uvi::modality_from_string("lung_ct") == uvi::Modality::lung_ct);
  CHECK(uvi::to_string(uvi::Modality::cardiac_mri) == "cardiac_mri");
  CHECK_THROWS_AS(uvi::modality_from_string("xray"), uvi::ContractViolation);
}

TEST_CASE("phantom endpoints are the noiseless frames when sigma is zero") {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 24;
  spec.amplitude = 1.5;
  auto pp = uvi::phantom_pair<F>(spec);
  CHECK(vol_bitwise_equal(pp.i0, uvi::phantom_frame<F>(spec, 0.0)));
  CHECK(vol_bitwise_equal(pp.i1, uvi::phantom_frame<F>(spec, 1.0)));
  F lo, hi;
  pp.i0.data.minmax(lo, hi);
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);

  spec.noise_sigma = 0.05;
  spec.seed = 7;
  auto n1 = uvi::phantom_pair<F>(spec);
  auto n2 = uvi::phantom_pair<F>(spec);
  CHECK(vol_bitwise_equal(n1.i0, n2.i0));
  CHECK(vol_bitwise_equal(n1.i1, n2.i1));
  CHECK(vol_max_abs_diff(n1.i0, pp.i0) > 0.0);
  spec.seed = 8;
  auto n3 = uvi::phantom_pair<F>(spec);
  CHECK(vol_max_abs_diff(n3.i0, n1.i0) > 0.0);
  n1.i0.data.minmax(lo, hi);
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);
}

TEST_CASE("the translating sphere follows its straight-line trajectory") {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 24;
  spec.amplitude = 1.5;

  const double u[3] = {1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0};
  auto centroid = [&](const uvi::Volume<F>& v, double* c) {
    double m = 0, my = 0, mz = 0, mx = 0;
    std::size_t i = 0;
    for (int y = 0; y < spec.d; ++y)
      for (int z = 0; z < spec.h; ++z)
        for (int x = 0; x < spec.w; ++x, ++i) {
          const double wgt = std::max(0.0, double(v.data[i]) - 0.1);
          m += wgt;
          my += wgt * y;
          mz += wgt * z;
          mx += wgt * x;
        }
    c[0] = my / m;
    c[1] = mz / m;
    c[2] = mx / m;
    return m;
  };

  double c0[3], cmid[3], c1[3];
  const double m0 = centroid(uvi::phantom_frame<F>(spec, 0.0), c0);
  const double mmid = centroid(uvi::phantom_frame<F>(spec, 0.5), cmid);
  const double m1 = centroid(uvi::phantom_frame<F>(spec, 1.0), c1);

  // the trajectory is centred: at t = 0.5 the sphere sits mid-volume
  const double mid[3] = {(spec.d - 1) / 2.0, (spec.h - 1) / 2.0,
                         (spec.w - 1) / 2.0};
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(cmid[k] - mid[k]) < 0.05);
    CHECK(std::abs(c1[k] - c0[k] - spec.amplitude * u[k]) < 0.05);
    CHECK(std::abs(cmid[k] - 0.5 * (c0[k] + c1[k])) < 0.05);
  }

  // translation conserves mass
  CHECK(std::abs(mmid - m0) / m0 < 0.005);
  CHECK(std::abs(m1 - m0) / m0 < 0.005);
  double cfar[3];
  const double mfar = centroid(uvi::phantom_frame<F>(spec, 1.5), cfar);
  CHECK(std::abs(mfar - m0) / m0 < 0.005);
}

TEST_CASE("ground-truth fields carry frame 0 onto every other frame") {
  for (const auto kind : {uvi::PhantomKind::translating_sphere,
                          uvi::PhantomKind::expanding_sphere,
                          uvi::PhantomKind::sinusoidal_deformation}) {
    uvi::PhantomSpec spec;
    spec.kind = kind;
    spec.d = spec.h = spec.w = 24;
    spec.amplitude = 1.5;
    auto f0 = uvi::phantom_frame<F>(spec, 0.0);
    for (const double t : {-0.5, 0.3, 1.0, 1.5}) {
      auto moved = uvi::warp(f0, uvi::phantom_field<F>(spec, t));
      auto truth = uvi::phantom_frame<F>(spec, t);
      // worst voxel sits on the 2-voxel object edge, where resampling the
      // rendered grid pays the full trilinear error; elsewhere it is tiny
      CHECK(vol_max_abs_diff(moved, truth) < 0.13);
      double mean = 0.0;
      for (std::size_t i = 0; i < moved.data.numel(); ++i)
        mean += std::abs(double(moved.data[i]) - truth.data[i]);
      CHECK(mean / double(moved.data.numel()) < 0.012);
    }
    // t = 0 is the identity displacement, so the warp is exact
    auto still = uvi::warp(f0, uvi::phantom_field<F>(spec, 0.0));
    CHECK(vol_max_abs_diff(still, f0) == 0.0);
  }
}

TEST_CASE("phantom frames vary smoothly in time") {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 24;
  spec.amplitude = 1.5;
  const double dt = 0.01;
  for (double t = 0.0; t < 1.0; t += 0.25) {
    auto a = uvi::phantom_frame<F>(spec, t);
    auto b = uvi::phantom_frame<F>(spec, t + dt);
    CHECK(vol_max_abs_diff(a, b) < 0.02);
  }
}

TEST_CASE("phantom labels are a two-channel simplex tracking the sphere") {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 24;
  spec.amplitude = 1.5;
  auto lab = uvi::phantom_labels<F>(spec, 0.5);
  CHECK(lab.data.channels() == 2);
  CHECK(lab.data.depth() == 24);
  CHECK(lab.data.height() == 24);
  CHECK(lab.data.width() == 24);
  const std::size_t plane = 24 * 24 * 24;
  for (std::size_t i = 0; i < plane; ++i) {
    CHECK(lab.data[i] >= 0.0f);
    CHECK(lab.data[plane + i] >= 0.0f);
    CHECK(lab.data[i] + lab.data[plane + i] == 1.0f);
  }

  // foreground centroid sits mid-volume at t = 0.5 (trajectory is centred)
  double m = 0, my = 0, mz = 0, mx = 0;
  std::size_t i = 0;
  for (int y = 0; y < spec.d; ++y)
    for (int z = 0; z < spec.h; ++z)
      for (int x = 0; x < spec.w; ++x, ++i) {
        const double wgt = lab.data[plane + i];
        m += wgt;
        my += wgt * y;
        mz += wgt * z;
        mx += wgt * x;
      }
  CHECK(std::abs(my / m - (spec.d - 1) / 2.0) < 0.05);
  CHECK(std::abs(mz / m - (spec.h - 1) / 2.0) < 0.05);
  CHECK(std::abs(mx / m - (spec.w - 1) / 2.0) < 0.05);

  // soft mass is close to the analytic sphere volume
  const double r = spec.radius();
  const double ball = 4.0 / 3.0 * 3.14159265358979323846 * r * r * r;
  CHECK(std::abs(m - ball) / ball < 0.1);
}

TEST_CASE("phantom validation rejects motion that escapes the volume") {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 16;
  spec.amplitude = 1.5;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);
  spec.amplitude = 1.2;
  CHECK_NOTHROW(spec.validate());

  spec = uvi::PhantomSpec{};
  spec.kind = uvi::PhantomKind::expanding_sphere;
  spec.d = spec.h = spec.w = 24;
  spec.amplitude = 7.0;  // sphere radius would cross zero before t = -0.5
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);

  spec = uvi::PhantomSpec{};
  spec.amplitude = -1.0;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);
  spec = uvi::PhantomSpec{};
  spec.noise_sigma = -0.1;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);
  spec = uvi::PhantomSpec{};
  spec.d = 8;
  CHECK_THROWS_AS(spec.validate(), uvi::ContractViolation);

  spec = uvi::PhantomSpec{};
  CHECK_THROWS_AS(uvi::phantom_frame<F>(spec, 1.6), uvi::ContractViolation);
  CHECK_THROWS_AS(uvi::phantom_field<F>(spec, -0.6), uvi::ContractViolation);
  CHECK_THROWS_AS(uvi::phantom_labels<F>(spec, 2.0), uvi::ContractViolation);

  CHECK(uvi::phantom_kind_from_string("expanding_sphere") ==
        uvi::PhantomKind::expanding_sphere);
  CHECK(uvi::to_string(uvi::PhantomKind::sinusoidal_deformation) ==
        "sinusoidal_deformation");
  CHECK_THROWS_AS(uvi::phantom_kind_from_string("bouncing_cube"),
                  uvi::ContractViolation);
}
