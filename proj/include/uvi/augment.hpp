#pragma once
// Label-carrying interpolation: soft segmentation volumes ride along the same
// flows as the images, fused by temporal distance; training can fold a Dice
// term over the label candidates into the cycle objective.

#include <cstdint>
#include <utility>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/interp.hpp"
#include "uvi/losses.hpp"
#include "uvi/train.hpp"
#include "uvi/volume.hpp"

namespace uvi {

// A segmentation with both views kept in sync: a K-channel soft simplex
// (channels sum to 1 per voxel) and the hard argmax map in {0..K-1}.
template <class S = float>
struct LabelVolume {
  Volume<S> soft;                    // (K, D, H, W)
  std::vector<std::int32_t> hard;    // flat (D, H, W)

  int label_count() const { return soft.channels(); }

  static LabelVolume from_soft(Volume<S> s, double simplex_tol = 1e-5) {
    require(s.channels() >= 1, "labels need at least one channel");
    LabelVolume out;
    out.soft = std::move(s);
    const int k = out.soft.channels();
    const std::size_t plane = static_cast<std::size_t>(out.soft.depth()) *
                              out.soft.height() * out.soft.width();
    out.hard.resize(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      double sum = 0.0;
      int best = 0;
      S best_v = out.soft.data[i];
      for (int c = 0; c < k; ++c) {
        const S v = out.soft.data[static_cast<std::size_t>(c) * plane + i];
        require(v >= S(0), "soft labels must be non-negative");
        sum += static_cast<double>(v);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      require(std::abs(sum - 1.0) <= simplex_tol,
              "soft labels must sum to 1 per voxel");
      out.hard[i] = best;
    }
    return out;
  }

  static LabelVolume from_hard(const std::vector<std::int32_t>& hard, int k,
                               int d, int h, int w) {
    require(k >= 1, "labels need at least one class");
    const std::size_t plane = static_cast<std::size_t>(d) * h * w;
    require(hard.size() == plane, "hard label map size mismatch");
    LabelVolume out;
    out.soft = Volume<S>(k, d, h, w);
    out.hard = hard;
    for (std::size_t i = 0; i < plane; ++i) {
      const std::int32_t v = hard[i];
      require(v >= 0 && v < k, "hard label outside vocabulary");
      out.soft.data[static_cast<std::size_t>(v) * plane + i] = S(1);
    }
    return out;
  }
};

// Warps every soft channel trilinearly, renormalizes the per-voxel sums back
// onto the simplex, and refreshes the hard map. A zero field is an exact
// identity (clamped trilinear weights sum to 1, so the per-voxel sum stays 1
// and the division is by one).
template <class S>
LabelVolume<S> warp_labels(const LabelVolume<S>& s, const DisplacementField<S>& f) {
  Volume<S> warped = warp(s.soft, f);
  const int k = warped.channels();
  const std::size_t plane = static_cast<std::size_t>(warped.depth()) *
                            warped.height() * warped.width();
  for (std::size_t i = 0; i < plane; ++i) {
    S sum = S(0);
    for (int c = 0; c < k; ++c) sum += warped.data[static_cast<std::size_t>(c) * plane + i];
    require(sum > S(0.5), "warped labels lost their mass");
    for (int c = 0; c < k; ++c) warped.data[static_cast<std::size_t>(c) * plane + i] /= sum;
  }
  return LabelVolume<S>::from_soft(std::move(warped));
}

template <class S = float>
struct AugmentResult {
  Volume<S> image;
  LabelVolume<S> labels;
};

// Synthesizes the image at t with the full interpolation path, and carries
// the endpoint labels along the same first-stage flows: warp s0 by t*f01 and
// s1 by (1-t)*f10, then blend the soft channels by temporal distance.
template <class S>
AugmentResult<S> augment_pair(ModelBundle<S>& bundle, const Volume<S>& i0,
                              const Volume<S>& i1, const LabelVolume<S>& s0,
                              const LabelVolume<S>& s1, double t) {
  require(t >= 0.0 && t <= 1.0, "augment_pair: t must lie in [0, 1]");
  require(s0.label_count() == s1.label_count(),
          "augment_pair: label vocabularies differ");
  require(s0.soft.depth() == i0.depth() && s0.soft.height() == i0.height() &&
              s0.soft.width() == i0.width() && s1.soft.data.same_shape(s0.soft.data),
          "augment_pair: labels must share the image grid");

  AugmentResult<S> out;
  out.image = interpolate(bundle, i0, i1, t);

  auto [f01, f10] = bundle.flow_forward(i0, i1);
  LabelVolume<S> a = warp_labels(s0, scale_field(f01, static_cast<S>(t)));
  LabelVolume<S> b = warp_labels(s1, scale_field(f10, static_cast<S>(1.0 - t)));
  Volume<S> soft = weighted_fuse(a.soft, b.soft, static_cast<S>(1.0 - t),
                                 static_cast<S>(t));
  out.labels = LabelVolume<S>::from_soft(std::move(soft));
  return out;
}

// cycle_step with a Dice term over label candidates that follow the image
// candidates' flows exactly (virtual labels from the first-stage fields,
// candidates from the second-stage fields, distance-weighted fusion). The
// labels never pass through the reconstruction net: it predicts intensity
// residuals, so Dice reads the fused warped candidates directly. w_dice == 0
// reproduces cycle_step bit for bit.
template <class S>
LossBreakdown cycle_step_with_labels(ModelBundle<S>& bundle, const Volume<S>& i0,
                                     const Volume<S>& i1, const LabelVolume<S>& s0,
                                     const LabelVolume<S>& s1, Adam<S>& opt,
                                     const TrainConfig& cfg, Rng& rng) {
  require(i0.data.dim(0) == 1 && i1.data.dim(0) == 1 &&
              i0.data.same_shape(i1.data),
          "cycle_step_with_labels wants two matching 1-channel volumes");
  require(s0.label_count() == s1.label_count(),
          "cycle_step_with_labels: label vocabularies differ");
  if (cfg.w_dice == 0.0) return cycle_step(bundle, i0, i1, opt, cfg, rng);

  const TripleTime tt = sample_times(rng, cfg.min_time_gap);
  Tape<S> t;
  BindList<S> reg;
  auto bd = bundle.bind(t, true, &reg);
  Node<S>* n0 = t.constant(i0.data);
  Node<S>* n1 = t.constant(i1.data);
  CycleNodes<S> g = build_cycle_graph(t, bd, n0, n1, tt, cfg);

  Node<S>* l0 = t.constant(s0.soft.data);
  Node<S>* l1 = t.constant(s1.soft.data);
  Node<S>* lv1 = t.warp(g.v1_from_first ? l0 : l1, g.vf1);
  Node<S>* lv2 = t.warp(g.v2_from_first ? l0 : l1, g.vf2);
  Node<S>* lv3 = t.warp(g.v3_from_first ? l0 : l1, g.vf3);
  Node<S>* cand0 = t.fuse(t.warp(lv1, g.ga), t.warp(lv2, g.gb),
                          static_cast<S>(g.wa), static_cast<S>(g.wb));
  Node<S>* cand1 = t.fuse(t.warp(lv2, g.gc), t.warp(lv3, g.gd),
                          static_cast<S>(g.wc), static_cast<S>(g.wd));
  Node<S>* dice0 = dice_loss_node(t, cand0, l0);
  Node<S>* dice1 = dice_loss_node(t, cand1, l1);
  Node<S>* total = t.add(
      g.total, t.scale(t.add(dice0, dice1), static_cast<S>(cfg.w_dice)));

  const double total_v = static_cast<double>(total->value[0]);
  if (!std::isfinite(total_v))
    throw TrainingDiverged(cat("non-finite loss at step ",
                               bundle.step_count + 1, ": ", total_v));
  t.backward(total);
  opt.step(reg);
  ++bundle.step_count;

  LossBreakdown b = extract_breakdown(g);
  b.total = total_v;
  b.dice_0 = static_cast<double>(dice0->value[0]);
  b.dice_1 = static_cast<double>(dice1->value[0]);
  b.has_dice = true;
  return b;
}

}  // namespace uvi
