#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "helpers.hpp"
#include "uvi/augment.hpp"
#include "uvi/preprocess.hpp"

using F = float;

namespace {

uvi::NetShape tiny_shape() {
  uvi::NetShape s;
  s.flow_enc = {4, 4, 4, 4};
  s.flow_dec = {4, 4, 4, 4, 4, 4, 4};
  s.recon_base = 4;
  return s;
}

uvi::TrainConfig tiny_config(std::uint64_t seed = 3) {
  uvi::TrainConfig c;
  c.shape = tiny_shape();
  c.rng_seed = seed;
  c.ncc_window = 3;
  c.learning_rate = 1e-3;
  return c;
}

uvi::PhantomSpec phantom_spec16(std::uint64_t seed = 50) {
  uvi::PhantomSpec spec;
  spec.d = spec.h = spec.w = 16;
  spec.amplitude = 1.2;
  spec.seed = seed;
  return spec;
}

bool soft_bitwise_equal(const uvi::Volume<F>& a, const uvi::Volume<F>& b) {
  if (!a.data.same_shape(b.data)) return false;
  for (std::size_t i = 0; i < a.data.numel(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

// random K-channel simplex labels
uvi::LabelVolume<F> random_labels(int k, int d, int h, int w,
                                  std::uint64_t seed) {
  uvi::Volume<F> soft(k, d, h, w);
  uvi::Rng rng(seed);
  const std::size_t plane = static_cast<std::size_t>(d) * h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double v = 0.05 + rng.uniform();
      soft.data[static_cast<std::size_t>(c) * plane + i] = static_cast<F>(v);
      sum += v;
    }
    for (int c = 0; c < k; ++c)
      soft.data[static_cast<std::size_t>(c) * plane + i] /= static_cast<F>(sum);
  }
  return uvi::LabelVolume<F>::from_soft(std::move(soft));
}

void check_simplex(const uvi::LabelVolume<F>& lv, double tol = 1e-5) {
  const int k = lv.label_count();
  const std::size_t plane = static_cast<std::size_t>(lv.soft.depth()) *
                            lv.soft.height() * lv.soft.width();
  REQUIRE(lv.hard.size() == plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const F v = lv.soft.data[static_cast<std::size_t>(c) * plane + i];
      REQUIRE(v >= 0.0f);
      sum += v;
    }
    REQUIRE(std::abs(sum - 1.0) <= tol);
  }
}

}  // namespace

TEST_CASE("hard and soft label views stay in sync") {
  const int d = 4, h = 5, w = 6;
  const std::size_t plane = d * h * w;
  std::vector<std::int32_t> hard(plane);
  for (std::size_t i = 0; i < plane; ++i) hard[i] = static_cast<int>(i % 3);

  auto lv = uvi::LabelVolume<F>::from_hard(hard, 3, d, h, w);
  CHECK(lv.label_count() == 3);
  CHECK(lv.hard == hard);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      const F v = lv.soft.data[static_cast<std::size_t>(c) * plane + i];
      CHECK(v == (c == hard[i] ? 1.0f : 0.0f));
    }
  }

  auto rl = random_labels(4, d, h, w, 51);
  check_simplex(rl);
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    F best_v = rl.soft.data[i];
    for (int c = 1; c < 4; ++c) {
      const F v = rl.soft.data[static_cast<std::size_t>(c) * plane + i];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    CHECK(rl.hard[i] == best);
  }

  // exact tie: the first maximal channel wins
  uvi::Volume<F> tie(2, 1, 1, 1);
  tie.data[0] = 0.5f;
  tie.data[1] = 0.5f;
  CHECK(uvi::LabelVolume<F>::from_soft(std::move(tie)).hard[0] == 0);

  uvi::Volume<F> broken(2, 1, 1, 2, F(0.7));
  CHECK_THROWS_AS(uvi::LabelVolume<F>::from_soft(std::move(broken)),
                  uvi::ContractViolation);
  uvi::Volume<F> negative(2, 1, 1, 1);
  negative.data[0] = 1.2f;
  negative.data[1] = -0.2f;
  CHECK_THROWS_AS(uvi::LabelVolume<F>::from_soft(std::move(negative)),
                  uvi::ContractViolation);

  std::vector<std::int32_t> out_of_vocab(plane, 0);
  out_of_vocab[0] = 3;
  CHECK_THROWS_AS(uvi::LabelVolume<F>::from_hard(out_of_vocab, 3, d, h, w),
                  uvi::ContractViolation);
  out_of_vocab[0] = -1;
  CHECK_THROWS_AS(uvi::LabelVolume<F>::from_hard(out_of_vocab, 3, d, h, w),
                  uvi::ContractViolation);
  std::vector<std::int32_t> short_map(plane - 1, 0);
  CHECK_THROWS_AS(uvi::LabelVolume<F>::from_hard(short_map, 3, d, h, w),
                  uvi::ContractViolation);
}

TEST_CASE("warp_labels is the identity on a zero field") {
  // labels whose per-voxel sums are exactly 1 come back bit for bit
  std::vector<std::int32_t> hard(6 * 6 * 6);
  for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = static_cast<int>(i % 3);
  auto onehot = uvi::LabelVolume<F>::from_hard(hard, 3, 6, 6, 6);
  uvi::DisplacementField<F> zero(6, 6, 6);
  auto moved = uvi::warp_labels(onehot, zero);
  CHECK(soft_bitwise_equal(moved.soft, onehot.soft));
  CHECK(moved.hard == onehot.hard);

  auto spec = phantom_spec16();
  auto pl = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 0.3));
  uvi::DisplacementField<F> zero16(16, 16, 16);
  auto pmoved = uvi::warp_labels(pl, zero16);
  CHECK(soft_bitwise_equal(pmoved.soft, pl.soft));

  // sums a few ulp off 1 get renormalized, so only near-identity holds
  auto rl = random_labels(3, 6, 6, 6, 52);
  auto rmoved = uvi::warp_labels(rl, zero);
  for (std::size_t i = 0; i < rl.soft.data.numel(); ++i)
    CHECK(std::abs(rmoved.soft.data[i] - rl.soft.data[i]) <= 1e-6f);
}

TEST_CASE("warp_labels shifts hard content by integer fields") {
  const int n = 6;
  const std::size_t plane = n * n * n;
  std::vector<std::int32_t> hard(plane, 0);
  auto idx = [&](int y, int z, int x) {
    return (static_cast<std::size_t>(y) * n + z) * n + x;
  };
  for (int y = 2; y < 4; ++y)
    for (int z = 2; z < 4; ++z)
      for (int x = 2; x < 4; ++x) hard[idx(y, z, x)] = 1;
  auto lv = uvi::LabelVolume<F>::from_hard(hard, 2, n, n, n);

  // out(p) samples in(p + f): a +1 x-field pulls the blob one voxel down in x
  uvi::DisplacementField<F> f(n, n, n);
  for (std::size_t i = 0; i < plane; ++i) f.data[2 * plane + i] = 1.0f;
  auto moved = uvi::warp_labels(lv, f);
  check_simplex(moved);
  for (int y = 0; y < n; ++y)
    for (int z = 0; z < n; ++z)
      for (int x = 0; x < n - 1; ++x) {
        const int want = hard[idx(y, z, x + 1)];
        CHECK(moved.hard[idx(y, z, x)] == want);
      }
}

TEST_CASE("warped labels stay on the simplex under smooth fields") {
  auto lv = random_labels(3, 8, 8, 8, 53);
  const std::size_t plane = 8 * 8 * 8;
  uvi::DisplacementField<F> f(8, 8, 8);
  uvi::Rng rng(54);
  for (std::size_t i = 0; i < f.data.numel(); ++i)
    f.data[i] = static_cast<F>(1.5 * (rng.uniform() - 0.5));
  auto moved = uvi::warp_labels(lv, f);
  check_simplex(moved, 1e-5);
  CHECK(moved.label_count() == 3);
  CHECK(moved.hard.size() == plane);
}

TEST_CASE("augment_pair returns the endpoints untouched at t = 0 and 1") {
  auto spec = phantom_spec16();
  auto pp = uvi::phantom_pair<F>(spec);
  auto s0 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 0.0));
  auto s1 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 1.0));

  auto bundle = uvi::ModelBundle<F>::init(tiny_shape(), 55);
  auto a0 = uvi::augment_pair(bundle, pp.i0, pp.i1, s0, s1, 0.0);
  CHECK(soft_bitwise_equal(a0.image, pp.i0));
  CHECK(soft_bitwise_equal(a0.labels.soft, s0.soft));
  CHECK(a0.labels.hard == s0.hard);
  auto a1 = uvi::augment_pair(bundle, pp.i0, pp.i1, s0, s1, 1.0);
  CHECK(soft_bitwise_equal(a1.image, pp.i1));
  CHECK(soft_bitwise_equal(a1.labels.soft, s1.soft));

  CHECK_THROWS_AS(uvi::augment_pair(bundle, pp.i0, pp.i1, s0, s1, -0.1),
                  uvi::ContractViolation);
  CHECK_THROWS_AS(uvi::augment_pair(bundle, pp.i0, pp.i1, s0, s1, 1.1),
                  uvi::ContractViolation);
  auto s_other = random_labels(3, 16, 16, 16, 56);
  CHECK_THROWS_AS(uvi::augment_pair(bundle, pp.i0, pp.i1, s0, s_other, 0.5),
                  uvi::ContractViolation);
  auto s_small = random_labels(2, 8, 8, 8, 57);
  CHECK_THROWS_AS(uvi::augment_pair(bundle, pp.i0, pp.i1, s_small, s_small, 0.5),
                  uvi::ContractViolation);
}

TEST_CASE("augmented labels track the moving sphere at mid-time") {
  auto spec = phantom_spec16();
  auto pp = uvi::phantom_pair<F>(spec);
  auto s0 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 0.0));
  auto s1 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 1.0));

  auto centroid_err = [&](const uvi::LabelVolume<F>& lv) {
    const std::size_t plane = 16 * 16 * 16;
    double m = 0, my = 0, mz = 0, mx = 0;
    std::size_t i = 0;
    for (int y = 0; y < 16; ++y)
      for (int z = 0; z < 16; ++z)
        for (int x = 0; x < 16; ++x, ++i) {
          const double wgt = lv.soft.data[plane + i];
          m += wgt;
          my += wgt * y;
          mz += wgt * z;
          mx += wgt * x;
        }
    const double mid = (16 - 1) / 2.0;
    return std::sqrt((my / m - mid) * (my / m - mid) +
                     (mz / m - mid) * (mz / m - mid) +
                     (mx / m - mid) * (mx / m - mid));
  };

  // untrained: both endpoint labels ride identity flows, the blend's centroid
  // is the midpoint of the endpoints, which the phantom centres at t = 0.5
  auto fresh = uvi::ModelBundle<F>::init(tiny_shape(), 58);
  auto mid_fresh = uvi::augment_pair(fresh, pp.i0, pp.i1, s0, s1, 0.5);
  check_simplex(mid_fresh.labels);
  CHECK(centroid_err(mid_fresh.labels) < 0.5);

  // a briefly trained model bends the labels along real flows; the centroid
  // must stay put and the simplex must survive the renormalization
  auto cfg = tiny_config(59);
  auto trained = uvi::ModelBundle<F>::init(cfg.shape, cfg.rng_seed);
  uvi::Adam<F> opt({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  uvi::Rng rng(60);
  for (int s = 0; s < 15; ++s) uvi::cycle_step(trained, pp.i0, pp.i1, opt, cfg, rng);
  auto mid = uvi::augment_pair(trained, pp.i0, pp.i1, s0, s1, 0.5);
  check_simplex(mid.labels);
  CHECK(centroid_err(mid.labels) < 0.5);
}

TEST_CASE("cycle_step_with_labels defers to cycle_step when dice is off") {
  auto spec = phantom_spec16();
  auto pp = uvi::phantom_pair<F>(spec);
  auto s0 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 0.0));
  auto s1 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 1.0));

  auto cfg = tiny_config(61);
  cfg.w_dice = 0.0;
  auto ba = uvi::ModelBundle<F>::init(cfg.shape, cfg.rng_seed);
  auto bb = uvi::ModelBundle<F>::init(cfg.shape, cfg.rng_seed);
  uvi::Adam<F> oa({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  uvi::Adam<F> ob({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  uvi::Rng ra(62), rb(62);

  auto with = uvi::cycle_step_with_labels(ba, pp.i0, pp.i1, s0, s1, oa, cfg, ra);
  auto plain = uvi::cycle_step(bb, pp.i0, pp.i1, ob, cfg, rb);
  CHECK_FALSE(with.has_dice);
  CHECK(with.total == plain.total);
  CHECK(with.image_fwd == plain.image_fwd);
  auto pa = ba.params();
  auto pb = bb.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].value->numel(); ++i)
      REQUIRE((*pa[k].value)[i] == (*pb[k].value)[i]);
}

TEST_CASE("the dice term joins the objective when enabled") {
  auto spec = phantom_spec16();
  auto pp = uvi::phantom_pair<F>(spec);
  auto s0 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 0.0));
  auto s1 = uvi::LabelVolume<F>::from_soft(uvi::phantom_labels<F>(spec, 1.0));

  auto cfg = tiny_config(63);
  auto plain_cfg = cfg;
  cfg.w_dice = 0.5;

  auto ba = uvi::ModelBundle<F>::init(cfg.shape, cfg.rng_seed);
  auto bb = uvi::ModelBundle<F>::init(cfg.shape, cfg.rng_seed);
  uvi::Adam<F> oa({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  uvi::Adam<F> ob({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  uvi::Rng ra(64), rb(64);

  auto with = uvi::cycle_step_with_labels(ba, pp.i0, pp.i1, s0, s1, oa, cfg, ra);
  auto plain = uvi::cycle_step(bb, pp.i0, pp.i1, ob, plain_cfg, rb);
  CHECK(with.has_dice);
  CHECK(std::isfinite(with.dice_0));
  CHECK(std::isfinite(with.dice_1));
  CHECK(with.dice_0 >= 0.0);
  CHECK(with.dice_1 >= 0.0);
  CHECK(with.dice_0 <= 1.0);
  CHECK(with.dice_1 <= 1.0);
  // same sampled times, so the image-side part of the objective is shared
  CHECK(std::abs(with.total -
                 (plain.total + 0.5 * (with.dice_0 + with.dice_1))) < 1e-5);

  // the dice gradient actually moved the parameters differently
  auto pa = ba.params();
  auto pb = bb.params();
  bool differs = false;
  for (std::size_t k = 0; k < pa.size() && !differs; ++k)
    for (std::size_t i = 0; i < pa[k].value->numel(); ++i)
      if ((*pa[k].value)[i] != (*pb[k].value)[i]) {
        differs = true;
        break;
      }
  CHECK(differs);

  // and the label-aware loop keeps running
  for (int s = 0; s < 4; ++s)
    uvi::cycle_step_with_labels(ba, pp.i0, pp.i1, s0, s1, oa, cfg, ra);
  CHECK(ba.step_count == 5);
}
