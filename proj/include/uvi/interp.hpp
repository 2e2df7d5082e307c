#pragma once
// Inference: synthesize the frame at any t in [0,1] from two endpoint frames,
// optionally extrapolate slightly beyond them, or fall back to the linear
// flow-scaling baseline. Also per-sample fine-tuning on one test pair.

#include <cmath>
#include <utility>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/config.hpp"
#include "uvi/nets.hpp"
#include "uvi/optimizer.hpp"
#include "uvi/tape.hpp"
#include "uvi/train.hpp"
#include "uvi/volume.hpp"

namespace uvi {

enum class InterpMode { cycle, linear_baseline };

struct InterpolationRequest {
  TimeStamp t;
  InterpMode mode = InterpMode::cycle;
  bool extrapolation_allowed = false;
};

namespace interp_detail {

template <class S>
void check_normalized(const Volume<S>& v, const char* which) {
  S lo, hi;
  v.data.minmax(lo, hi);
  require(lo >= S(-0.001) && hi <= S(1.001),
          cat(which, " must be normalized to [0, 1]"));
}

// Everything t-independent about a pair: flows both ways and the two feature
// pyramids, computed once and shared across all requested times.
template <class S>
struct PairContext {
  Tensor<S> f01, f10;
  FeaturePyramid<S> p0, p1;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
};

template <class S>
PairContext<S> make_context(ModelBundle<S>& bundle, const Volume<S>& i0,
                            const Volume<S>& i1) {
  check_normalized(i0, "frame 0");
  check_normalized(i1, "frame 1");
  require(i0.data.same_shape(i1.data), "frames must share a shape");
  PairContext<S> ctx;
  auto [f01, f10] = bundle.flow_forward(i0, i1);
  ctx.f01 = std::move(f01.data);
  ctx.f10 = std::move(f10.data);
  ctx.p0 = bundle.feature_forward(i0);
  ctx.p1 = bundle.feature_forward(i1);
  ctx.spacing = i0.spacing;
  return ctx;
}

// One t: candidates from both endpoints, inverse-distance fusion, then the
// reconstruction refinement with pyramids carried along the same flows.
template <class S>
Volume<S> synthesize(ModelBundle<S>& bundle, const PairContext<S>& ctx,
                     const Volume<S>& i0, const Volume<S>& i1, double tt) {
  Tape<S> t;
  auto rb = bundle.recon.bind(t, false, nullptr);
  Node<S>* n0 = t.constant(i0.data);
  Node<S>* n1 = t.constant(i1.data);
  Node<S>* g0 = t.scale(t.constant(ctx.f01), static_cast<S>(tt));
  Node<S>* g1 = t.scale(t.constant(ctx.f10), static_cast<S>(1.0 - tt));
  Node<S>* cand0 = t.warp(n0, g0);
  Node<S>* cand1 = t.warp(n1, g1);
  Node<S>* fused = t.fuse(cand0, cand1, static_cast<S>(1.0 - tt),
                          static_cast<S>(tt));

  BoundPyramid<S> p0, p1;
  p0.channels = ctx.p0.channels;
  p1.channels = ctx.p1.channels;
  for (int k = 0; k < 3; ++k) {
    if (ctx.p0.channels[k] == 0) continue;
    p0.levels[k] = t.constant(ctx.p0.levels[k]);
    p1.levels[k] = t.constant(ctx.p1.levels[k]);
  }
  BoundPyramid<S> s0 = train_detail::warp_pyramid(t, p0, g0);
  BoundPyramid<S> s1 = train_detail::warp_pyramid(t, p1, g1);

  auto [out, res] = rb(t, fused, s0, s1);
  (void)res;
  Volume<S> v;
  v.data = out->value;
  v.spacing = ctx.spacing;
  return v;
}

}  // namespace interp_detail

// Ordered outputs, one per t; the flows and feature pyramids are computed
// once, so a sweep costs one registration plus one refinement per frame.
template <class S>
std::vector<Volume<S>> interpolate_sequence(ModelBundle<S>& bundle,
                                            const Volume<S>& i0,
                                            const Volume<S>& i1,
                                            const std::vector<double>& ts) {
  for (double tt : ts)
    require(tt >= 0.0 && tt <= 1.0, cat("interpolation time ", tt,
                                        " outside [0, 1]"));
  auto ctx = interp_detail::make_context(bundle, i0, i1);
  std::vector<Volume<S>> out;
  out.reserve(ts.size());
  for (double tt : ts)
    out.push_back(interp_detail::synthesize(bundle, ctx, i0, i1, tt));
  return out;
}

template <class S>
Volume<S> interpolate(ModelBundle<S>& bundle, const Volume<S>& i0,
                      const Volume<S>& i1, double tt) {
  return std::move(interpolate_sequence(bundle, i0, i1, {tt}).front());
}

// Naive baseline: scale the forward flow, warp frame 0, done.
template <class S>
Volume<S> interpolate_linear_baseline(ModelBundle<S>& bundle,
                                      const Volume<S>& i0, const Volume<S>& i1,
                                      double tt) {
  require(tt >= 0.0 && tt <= 1.0, cat("interpolation time ", tt,
                                      " outside [0, 1]"));
  interp_detail::check_normalized(i0, "frame 0");
  interp_detail::check_normalized(i1, "frame 1");
  auto [f01, f10] = bundle.flow_forward(i0, i1);
  (void)f10;
  return warp(i0, scale_field(f01, static_cast<S>(tt)));
}

// Beyond-endpoint synthesis, first stage only, half-interval bound.
template <class S>
Volume<S> extrapolate(ModelBundle<S>& bundle, const Volume<S>& i0,
                      const Volume<S>& i1, double tt) {
  require((tt >= -0.5 && tt < 0.0) || (tt > 1.0 && tt <= 1.5),
          cat("extrapolation time ", tt,
              " outside [-0.5, 0) and (1, 1.5]"));
  interp_detail::check_normalized(i0, "frame 0");
  interp_detail::check_normalized(i1, "frame 1");
  auto [f01, f10] = bundle.flow_forward(i0, i1);
  if (tt < 0.0) return warp(i0, scale_field(f01, static_cast<S>(tt)));
  return warp(i1, scale_field(f10, static_cast<S>(1.0 - tt)));
}

// Request-level dispatch used by the CLI.
template <class S>
Volume<S> run_interpolation(ModelBundle<S>& bundle, const Volume<S>& i0,
                            const Volume<S>& i1,
                            const InterpolationRequest& req) {
  const double tt = req.t.t;
  if (req.t.interpolates()) {
    if (req.mode == InterpMode::linear_baseline)
      return interpolate_linear_baseline(bundle, i0, i1, tt);
    return interpolate(bundle, i0, i1, tt);
  }
  require(req.extrapolation_allowed,
          cat("time ", tt, " needs extrapolation, which is not enabled"));
  require(req.t.extrapolates(), cat("time ", tt, " is out of reach"));
  return extrapolate(bundle, i0, i1, tt);
}

// Fine-tune a copy of the bundle on one test pair; the input bundle (and its
// optimizer state, when given) stay untouched. The clone continues from the
// passed-in Adam moments rather than restarting cold.
template <class S>
ModelBundle<S> instance_optimize(const ModelBundle<S>& bundle,
                                 const Volume<S>& i0, const Volume<S>& i1,
                                 int steps, const TrainConfig& cfg,
                                 const Adam<S>* opt_in = nullptr,
                                 Adam<S>* opt_out = nullptr) {
  require(steps >= 0, "instance_optimize wants steps >= 0");
  ModelBundle<S> clone = bundle;
  Adam<S> opt = opt_in ? *opt_in
                       : Adam<S>(AdamConfig{cfg.learning_rate, 0.9, 0.999,
                                            1e-8, cfg.clip_norm});
  Rng rng(cfg.rng_seed ^ 0x696e7374616e6365ull);
  for (int s = 0; s < steps; ++s)
    (void)cycle_step(clone, i0, i1, opt, cfg, rng);
  if (opt_out) *opt_out = std::move(opt);
  return clone;
}

}  // namespace uvi
