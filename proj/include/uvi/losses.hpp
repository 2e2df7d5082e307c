#pragma once
// Training losses, built from the tape primitives so gradients come from the
// same code path as values:
//   ncc_local    — mean over voxels of the signed windowed correlation
//                  coefficient, computed from central sums with a variance
//                  floor delta guarding near-constant windows
//   charbonnier  — mean sqrt(diff^2 + eps^2)
//   image_loss   — charbonnier - ncc (maximizing correlation)
//   smoothness   — mean squared forward difference, averaged over the 3 axes
//   warp_loss    — symmetric registration objective over a frame pair
//   dice_loss    — 1 - mean per-channel soft Dice overlap
// plus a finite-difference gradient checker used by the verification suite.

#include <functional>
#include <string>
#include <vector>

#include "uvi/rng.hpp"
#include "uvi/tape.hpp"
#include "uvi/tensor.hpp"
#include "uvi/volume.hpp"

namespace uvi {

inline constexpr double kVarianceFloor = 1e-5;
inline constexpr double kDiceFloor = 1e-5;

// ---------------------------------------------------------------------------
// Graph builders.
// ---------------------------------------------------------------------------

// Mean local correlation coefficient in [-1, 1] (up to rounding). Central
// sums are windowed with border-clipped boxes; the floor is added to both
// variance sums before the product under the square root.
template <class S>
Node<S>* ncc_local_node(Tape<S>& t, Node<S>* a, Node<S>* b, int win) {
  require(a->value.same_shape(b->value), "ncc_local: shape mismatch");
  require(a->value.rank() == 4, "ncc_local: rank-4 inputs required");
  require(win >= 3 && win % 2 == 1, "ncc_local: window must be odd and >= 3");
  // Per-window valid-voxel counts (constant for a given shape/window).
  Tensor<S> ones = Tensor<S>::like(a->value, S(1));
  auto* nmap = t.box_sum(t.constant(std::move(ones)), win);
  Tensor<S> inv = Tensor<S>::like(nmap->value);
  for (std::size_t i = 0; i < inv.numel(); ++i)
    inv[i] = static_cast<S>(1.0 / static_cast<double>(nmap->value[i]));
  auto* inv_n = t.constant(std::move(inv));

  auto* sa = t.box_sum(a, win);
  auto* sb = t.box_sum(b, win);
  auto* saa = t.box_sum(t.mul(a, a), win);
  auto* sbb = t.box_sum(t.mul(b, b), win);
  auto* sab = t.box_sum(t.mul(a, b), win);

  const S delta = static_cast<S>(kVarianceFloor);
  auto* cov = t.sub(sab, t.mul(t.mul(sa, sb), inv_n));
  auto* var_a = t.sub(saa, t.mul(t.mul(sa, sa), inv_n));
  auto* var_b = t.sub(sbb, t.mul(t.mul(sb, sb), inv_n));
  auto* den = t.sqrt_op(
      t.mul(t.add_scalar(var_a, delta), t.add_scalar(var_b, delta)));
  return t.mean_all(t.div(cov, den));
}

template <class S>
Node<S>* charbonnier_node(Tape<S>& t, Node<S>* a, Node<S>* b, S eps) {
  return t.charbonnier_mean(a, b, eps);
}

// charbonnier - ncc; lower is better.
template <class S>
Node<S>* image_loss_node(Tape<S>& t, Node<S>* a, Node<S>* b, int win, S eps) {
  auto* pen = charbonnier_node(t, a, b, eps);
  auto* cc = ncc_local_node(t, a, b, win);
  return t.sub(pen, cc);
}

// Mean squared forward difference of a displacement field, averaged over the
// depth/height/width axes.
template <class S>
Node<S>* smoothness_node(Tape<S>& t, Node<S>* field) {
  require(field->value.rank() == 4 && field->value.dim(0) == 3,
          "smoothness: (3,D,H,W) field required");
  Node<S>* parts[3];
  for (int axis = 1; axis <= 3; ++axis) {
    auto* d = t.axis_diff(field, axis);
    parts[axis - 1] = t.mean_all(t.mul(d, d));
  }
  return t.scale(t.add(t.add(parts[0], parts[1]), parts[2]),
                 static_cast<S>(1.0 / 3.0));
}

template <class S>
struct WarpLossParts {
  Node<S>* total = nullptr;
  Node<S>* smooth_fwd = nullptr;  // smoothness(f01)
  Node<S>* smooth_bwd = nullptr;  // smoothness(f10)
  Node<S>* image_fwd = nullptr;   // image_loss(warp(i0,f01), i1)
  Node<S>* image_bwd = nullptr;   // image_loss(warp(i1,f10), i0)
};

// Symmetric registration objective. The combining tree pairs the two
// smoothness terms and the two image terms before scaling, so swapping the
// frame/flow roles yields a bitwise-identical total.
template <class S>
WarpLossParts<S> warp_loss_node(Tape<S>& t, Node<S>* i0, Node<S>* i1,
                                Node<S>* f01, Node<S>* f10, int win, S eps,
                                S w_smooth, S w_image) {
  WarpLossParts<S> parts;
  parts.smooth_fwd = smoothness_node(t, f01);
  parts.smooth_bwd = smoothness_node(t, f10);
  parts.image_fwd = image_loss_node(t, t.warp(i0, f01), i1, win, eps);
  parts.image_bwd = image_loss_node(t, t.warp(i1, f10), i0, win, eps);
  auto* s = t.add(parts.smooth_fwd, parts.smooth_bwd);
  auto* im = t.add(parts.image_fwd, parts.image_bwd);
  parts.total = t.add(t.scale(s, w_smooth), t.scale(im, w_image));
  return parts;
}

// Endpoint-reconstruction objective: how well a cycled frame matches its
// original, plus an L1 penalty keeping the predicted residual small.
template <class S>
Node<S>* cycle_loss_node(Tape<S>& t, Node<S>* i, Node<S>* i_cyc,
                         Node<S>* residual, int win, S eps) {
  return t.add(image_loss_node(t, i, i_cyc, win, eps),
               t.mean_all(t.abs_op(residual)));
}

// 1 - mean over channels of (2*sum(p*t)+delta) / (sum(p)+sum(t)+delta).
template <class S>
Node<S>* dice_loss_node(Tape<S>& t, Node<S>* p, Node<S>* target) {
  require(p->value.same_shape(target->value), "dice_loss: shape mismatch");
  const S delta = static_cast<S>(kDiceFloor);
  auto* inter = t.channel_sums(t.mul(p, target));
  auto* sp = t.channel_sums(p);
  auto* st = t.channel_sums(target);
  auto* num = t.add_scalar(t.scale(inter, S(2)), delta);
  auto* den = t.add_scalar(t.add(sp, st), delta);
  auto* mean_dice = t.mean_all(t.div(num, den));
  return t.add_scalar(t.scale(mean_dice, S(-1)), S(1));
}

// ---------------------------------------------------------------------------
// Value-only conveniences.
// ---------------------------------------------------------------------------

template <class S>
double ncc_local(const Volume<S>& a, const Volume<S>& b, int win = 9) {
  Tape<S> t;
  return static_cast<double>(
      ncc_local_node(t, t.constant(a.data), t.constant(b.data), win)->value[0]);
}

template <class S>
double charbonnier(const Volume<S>& a, const Volume<S>& b, S eps) {
  Tape<S> t;
  return static_cast<double>(
      charbonnier_node(t, t.constant(a.data), t.constant(b.data), eps)->value[0]);
}

template <class S>
double smoothness(const DisplacementField<S>& f) {
  Tape<S> t;
  return static_cast<double>(smoothness_node(t, t.constant(f.data))->value[0]);
}

template <class S>
double image_loss(const Volume<S>& a, const Volume<S>& b, int win, S eps) {
  Tape<S> t;
  return static_cast<double>(
      image_loss_node(t, t.constant(a.data), t.constant(b.data), win, eps)
          ->value[0]);
}

template <class S>
double dice_loss(const Volume<S>& p, const Volume<S>& target) {
  Tape<S> t;
  return static_cast<double>(
      dice_loss_node(t, t.constant(p.data), t.constant(target.data))->value[0]);
}

template <class S>
double warp_loss(const Volume<S>& i0, const Volume<S>& i1,
                 const DisplacementField<S>& f01,
                 const DisplacementField<S>& f10, int win, S eps) {
  Tape<S> t;
  auto parts =
      warp_loss_node(t, t.constant(i0.data), t.constant(i1.data),
                     t.constant(f01.data), t.constant(f10.data), win, eps,
                     S(1), S(1));
  return static_cast<double>(parts.total->value[0]);
}

template <class S>
double cycle_loss(const Volume<S>& i, const Volume<S>& i_cyc,
                  const Volume<S>& residual, int win, S eps) {
  Tape<S> t;
  return static_cast<double>(
      cycle_loss_node(t, t.constant(i.data), t.constant(i_cyc.data),
                      t.constant(residual.data), win, eps)
          ->value[0]);
}

// Per-term values of one training step; serialized to the JSONL log.
struct LossBreakdown {
  double total = 0;
  double smooth_fwd = 0, smooth_bwd = 0;
  double image_fwd = 0, image_bwd = 0;
  double cyc_image_0 = 0, cyc_image_1 = 0;
  double reg_0 = 0, reg_1 = 0;
  double dice_0 = 0, dice_1 = 0;
  bool has_dice = false;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  // max over samples of min(rel, abs): a sample counts as wrong only if both
  // its relative and absolute error are large. Piecewise-linear activations
  // make pure relative error meaningless when the finite-difference step
  // straddles a kink on a near-zero gradient entry.
  double max_joint_err = 0.0;
  long checked = 0;
  // location of the worst entry, for diagnostics
  int worst_input = -1;
  std::size_t worst_index = 0;
};

// `build` maps (tape, leaves) to a scalar node; leaves mirror `inputs`.
// Central differences with step h on `samples` randomly chosen entries per
// input (all entries if samples <= 0). Relative error denominators are
// floored at 1e-6.
template <class S, class Build>
GradCheckReport grad_check(std::vector<Tensor<S>>& inputs, Build build,
                           double h, long samples, Rng& rng) {
  GradCheckReport rep;
  // analytic gradients
  Tape<S> t;
  std::vector<Node<S>*> leaves;
  leaves.reserve(inputs.size());
  for (auto& in : inputs) leaves.push_back(t.leaf(in, true));
  Node<S>* root = build(t, leaves);
  require(root->value.numel() == 1, "grad_check: objective must be scalar");
  t.backward(root);
  std::vector<Tensor<S>> grads;
  grads.reserve(inputs.size());
  for (auto* l : leaves) {
    l->ensure_grad();
    grads.push_back(l->grad);
  }

  const auto eval = [&](const std::vector<Tensor<S>>& xs) {
    Tape<S> t2;
    std::vector<Node<S>*> ls;
    ls.reserve(xs.size());
    for (const auto& x : xs) {
      Tensor<S> copy = x;
      ls.push_back(t2.constant(std::move(copy)));
    }
    return static_cast<double>(build(t2, ls)->value[0]);
  };

  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    const std::size_t n = inputs[ii].numel();
    std::vector<std::size_t> picks;
    if (samples <= 0 || static_cast<std::size_t>(samples) >= n) {
      picks.resize(n);
      for (std::size_t k = 0; k < n; ++k) picks[k] = k;
    } else {
      picks.reserve(static_cast<std::size_t>(samples));
      for (long k = 0; k < samples; ++k)
        picks.push_back(static_cast<std::size_t>(rng.next_u64() % n));
    }
    for (std::size_t j : picks) {
      const S saved = inputs[ii][j];
      inputs[ii][j] = saved + static_cast<S>(h);
      const double fp = eval(inputs);
      inputs[ii][j] = saved - static_cast<S>(h);
      const double fm = eval(inputs);
      inputs[ii][j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = static_cast<double>(grads[ii][j]);
      const double abs_err = std::abs(fd - an);
      double den = std::abs(fd) > std::abs(an) ? std::abs(fd) : std::abs(an);
      if (den < 1e-6) den = 1e-6;
      const double rel = abs_err / den;
      ++rep.checked;
      if (abs_err > rep.max_abs_err) rep.max_abs_err = abs_err;
      const double joint = rel < abs_err ? rel : abs_err;
      if (joint > rep.max_joint_err) {
        rep.max_joint_err = joint;
        rep.worst_input = static_cast<int>(ii);
        rep.worst_index = j;
      }
      if (rel > rep.max_rel_err) rep.max_rel_err = rel;
    }
  }
  return rep;
}

}  // namespace uvi
