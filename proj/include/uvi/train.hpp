#pragma once
// Unsupervised training: learn flow/feature/reconstruction nets from endpoint
// frame pairs only. Each step synthesizes virtual frames at three random
// times, re-registers them, reconstructs both endpoints from the virtual
// material, and penalizes the difference to the real frames — a time-domain
// cycle. No intermediate ground truth is ever consumed.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uvi/checkpoint.hpp"
#include "uvi/common.hpp"
#include "uvi/config.hpp"
#include "uvi/losses.hpp"
#include "uvi/nets.hpp"
#include "uvi/optimizer.hpp"
#include "uvi/rng.hpp"
#include "uvi/tape.hpp"
#include "uvi/volume.hpp"

namespace uvi {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Virtual-frame times.
// ---------------------------------------------------------------------------

struct TripleTime {
  double t1 = -0.25;  // in [-0.5, 0]
  double t2 = 0.5;    // in [0, 1]
  double t3 = 1.25;   // in [1, 1.5]
};

inline TripleTime sample_times(Rng& rng, double min_gap = 1e-3) {
  TripleTime tt;
  do {
    tt.t1 = rng.uniform(-0.5, 0.0);
    tt.t2 = rng.uniform(0.0, 1.0);
    tt.t3 = rng.uniform(1.0, 1.5);
  } while (tt.t2 - tt.t1 < min_gap || tt.t3 - tt.t2 < min_gap);
  return tt;
}

// ---------------------------------------------------------------------------
// Virtual frames: warp whichever endpoint is closer in time.
// ---------------------------------------------------------------------------

// Scaled field used to synthesize the frame at time t, and which endpoint it
// warps. t <= 0.5 pulls from frame 0 via t*f01; t > 0.5 from frame 1 via
// (1-t)*f10.
template <class S>
Node<S>* virtual_field(Tape<S>& t, Node<S>* f01, Node<S>* f10, double tt,
                       bool& from_first) {
  require(tt >= -0.5 && tt <= 1.5, "virtual frame time outside [-0.5, 1.5]");
  from_first = tt <= 0.5;
  if (from_first) return t.scale(f01, static_cast<S>(tt));
  return t.scale(f10, static_cast<S>(1.0 - tt));
}

template <class S>
Node<S>* make_virtual_node(Tape<S>& t, Node<S>* i0, Node<S>* i1, Node<S>* f01,
                           Node<S>* f10, double tt) {
  bool from_first = true;
  Node<S>* field = virtual_field(t, f01, f10, tt, from_first);
  return t.warp(from_first ? i0 : i1, field);
}

template <class S>
Volume<S> make_virtual(const Volume<S>& i0, const Volume<S>& i1,
                       const DisplacementField<S>& f01,
                       const DisplacementField<S>& f10, double tt) {
  Tape<S> t;
  Node<S>* out = make_virtual_node(t, t.constant(i0.data), t.constant(i1.data),
                                   t.constant(f01.data), t.constant(f10.data), tt);
  Volume<S> v;
  v.data = out->value;
  v.spacing = i0.spacing;
  return v;
}

// ---------------------------------------------------------------------------
// The cycle graph of one training step.
// ---------------------------------------------------------------------------

template <class S>
struct CycleNodes {
  Node<S>* f01 = nullptr;
  Node<S>* f10 = nullptr;
  WarpLossParts<S> warp;
  Node<S>* v1 = nullptr;
  Node<S>* v2 = nullptr;
  Node<S>* v3 = nullptr;
  // scaled first-stage fields behind v1..v3 and their sources, reused for
  // warping label volumes along the same geometry
  Node<S>* vf1 = nullptr;
  Node<S>* vf2 = nullptr;
  Node<S>* vf3 = nullptr;
  bool v1_from_first = true, v2_from_first = true, v3_from_first = false;
  // second-stage scaled fields: candidates toward frame 0 come from v1 (via
  // ga) and v2 (via gb); toward frame 1 from v2 (via gc) and v3 (via gd)
  Node<S>* ga = nullptr;
  Node<S>* gb = nullptr;
  Node<S>* gc = nullptr;
  Node<S>* gd = nullptr;
  double wa = 0, wb = 0, wc = 0, wd = 0;  // fusion weights; wa+wb = wc+wd = 1
  Node<S>* fused0 = nullptr;
  Node<S>* fused1 = nullptr;
  Node<S>* out0 = nullptr;
  Node<S>* res0 = nullptr;
  Node<S>* out1 = nullptr;
  Node<S>* res1 = nullptr;
  Node<S>* cyc_image_0 = nullptr;  // null when the ablation disables them
  Node<S>* cyc_image_1 = nullptr;
  Node<S>* reg_0 = nullptr;
  Node<S>* reg_1 = nullptr;
  Node<S>* total = nullptr;
};

namespace train_detail {

// Field at half resolution: displacements shrink with the grid.
template <class S>
Node<S>* half_field(Tape<S>& t, Node<S>* f) {
  const int D = f->value.dim(1), H = f->value.dim(2), W = f->value.dim(3);
  require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0,
          "field halving needs even dims");
  return t.scale(t.resize(f, D / 2, H / 2, W / 2), S(0.5));
}

// Warp every pyramid level by the matching downscaled version of `field`.
template <class S>
BoundPyramid<S> warp_pyramid(Tape<S>& t, const BoundPyramid<S>& p,
                             Node<S>* field) {
  BoundPyramid<S> out;
  out.channels = p.channels;
  Node<S>* f = field;
  for (int k = 0; k < 3; ++k) {
    if (k > 0 && (p.levels[1] || p.levels[2])) f = half_field(t, f);
    if (p.levels[k]) out.levels[k] = t.warp(p.levels[k], f);
  }
  return out;
}

}  // namespace train_detail

template <class S>
CycleNodes<S> build_cycle_graph(Tape<S>& t, BundleBound<S>& bd, Node<S>* i0,
                                Node<S>* i1, const TripleTime& tt,
                                const TrainConfig& cfg) {
  using train_detail::warp_pyramid;
  CycleNodes<S> g;
  const int win = cfg.ncc_window;
  const S eps = static_cast<S>(cfg.charbonnier_eps);

  // first stage: register the real endpoints
  auto [f01, f10] = bd.flow.flows(t, i0, i1);
  g.f01 = f01;
  g.f10 = f10;
  g.warp = warp_loss_node(t, i0, i1, f01, f10, win, eps,
                          static_cast<S>(cfg.w_smooth),
                          static_cast<S>(cfg.w_image));

  // virtual frames at the three sampled times
  g.vf1 = virtual_field(t, f01, f10, tt.t1, g.v1_from_first);
  g.vf2 = virtual_field(t, f01, f10, tt.t2, g.v2_from_first);
  g.vf3 = virtual_field(t, f01, f10, tt.t3, g.v3_from_first);
  g.v1 = t.warp(g.v1_from_first ? i0 : i1, g.vf1);
  g.v2 = t.warp(g.v2_from_first ? i0 : i1, g.vf2);
  g.v3 = t.warp(g.v3_from_first ? i0 : i1, g.vf3);

  // second stage: register the virtual pairs and interpolate back to the
  // endpoints, scaling each flow by the fraction of the time gap to cover
  auto [p12, p21] = bd.flow.flows(t, g.v1, g.v2);
  auto [p23, p32] = bd.flow.flows(t, g.v2, g.v3);
  const double d21 = tt.t2 - tt.t1, d32 = tt.t3 - tt.t2;
  const double fa = -tt.t1 / d21;        // v1 -> time 0 along p12
  const double fb = tt.t2 / d21;         // v2 -> time 0 along p21
  const double fc = (1.0 - tt.t2) / d32;  // v2 -> time 1 along p23
  const double fd = (tt.t3 - 1.0) / d32;  // v3 -> time 1 along p32
  require(fa >= 0.0 && fa <= 1.0 && fb >= 0.0 && fb <= 1.0 && fc >= 0.0 &&
              fc <= 1.0 && fd >= 0.0 && fd <= 1.0,
          "candidate scale factor escaped [0, 1]");
  g.ga = t.scale(p12, static_cast<S>(fa));
  g.gb = t.scale(p21, static_cast<S>(fb));
  g.gc = t.scale(p23, static_cast<S>(fc));
  g.gd = t.scale(p32, static_cast<S>(fd));
  Node<S>* cand_a = t.warp(g.v1, g.ga);
  Node<S>* cand_b = t.warp(g.v2, g.gb);
  Node<S>* cand_c = t.warp(g.v2, g.gc);
  Node<S>* cand_d = t.warp(g.v3, g.gd);

  // inverse-distance fusion; the complement form keeps each pair summing to 1
  g.wa = tt.t2 / d21;
  g.wb = 1.0 - g.wa;
  g.wc = (tt.t3 - 1.0) / d32;
  g.wd = 1.0 - g.wc;
  g.fused0 = t.fuse(cand_a, cand_b, static_cast<S>(g.wa), static_cast<S>(g.wb));
  g.fused1 = t.fuse(cand_c, cand_d, static_cast<S>(g.wc), static_cast<S>(g.wd));

  // feature pyramids of the virtual frames, carried along the same flows
  BoundPyramid<S> p1 = bd.feat(t, g.v1);
  BoundPyramid<S> p2 = bd.feat(t, g.v2);
  BoundPyramid<S> p3 = bd.feat(t, g.v3);
  BoundPyramid<S> sa = warp_pyramid(t, p1, g.ga);
  BoundPyramid<S> sb = warp_pyramid(t, p2, g.gb);
  BoundPyramid<S> sc = warp_pyramid(t, p2, g.gc);
  BoundPyramid<S> sd = warp_pyramid(t, p3, g.gd);

  auto [out0, res0] = bd.recon(t, g.fused0, sa, sb);
  auto [out1, res1] = bd.recon(t, g.fused1, sc, sd);
  g.out0 = out0;
  g.res0 = res0;
  g.out1 = out1;
  g.res1 = res1;

  // loss assembly
  g.total = g.warp.total;
  if (cfg.use_image_cyc) {
    g.cyc_image_0 = image_loss_node(t, out0, i0, win, eps);
    g.cyc_image_1 = image_loss_node(t, out1, i1, win, eps);
    g.total = t.add(g.total, t.scale(t.add(g.cyc_image_0, g.cyc_image_1),
                                     static_cast<S>(cfg.w_cyc)));
  }
  if (cfg.use_reg) {
    g.reg_0 = t.mean_all(t.abs_op(res0));
    g.reg_1 = t.mean_all(t.abs_op(res1));
    g.total = t.add(g.total, t.scale(t.add(g.reg_0, g.reg_1),
                                     static_cast<S>(cfg.w_reg)));
  }
  return g;
}

template <class S>
LossBreakdown extract_breakdown(const CycleNodes<S>& g) {
  LossBreakdown b;
  const auto val = [](Node<S>* n) {
    return n ? static_cast<double>(n->value[0]) : 0.0;
  };
  b.total = val(g.total);
  b.smooth_fwd = val(g.warp.smooth_fwd);
  b.smooth_bwd = val(g.warp.smooth_bwd);
  b.image_fwd = val(g.warp.image_fwd);
  b.image_bwd = val(g.warp.image_bwd);
  b.cyc_image_0 = val(g.cyc_image_0);
  b.cyc_image_1 = val(g.cyc_image_1);
  b.reg_0 = val(g.reg_0);
  b.reg_1 = val(g.reg_1);
  return b;
}

// One optimizer step on one pair. Throws TrainingDiverged on a non-finite
// loss before touching the parameters.
template <class S>
LossBreakdown cycle_step(ModelBundle<S>& bundle, const Volume<S>& i0,
                         const Volume<S>& i1, Adam<S>& opt,
                         const TrainConfig& cfg, Rng& rng) {
  require(i0.data.dim(0) == 1 && i1.data.dim(0) == 1 &&
              i0.data.same_shape(i1.data),
          "cycle_step wants two matching 1-channel volumes");
  const TripleTime tt = sample_times(rng, cfg.min_time_gap);
  Tape<S> t;
  BindList<S> reg;
  auto bd = bundle.bind(t, true, &reg);
  Node<S>* n0 = t.constant(i0.data);
  Node<S>* n1 = t.constant(i1.data);
  CycleNodes<S> g = build_cycle_graph(t, bd, n0, n1, tt, cfg);
  const double total = static_cast<double>(g.total->value[0]);
  if (!std::isfinite(total))
    throw TrainingDiverged(cat("non-finite loss at step ",
                               bundle.step_count + 1, ": ", total));
  t.backward(g.total);
  opt.step(reg);
  ++bundle.step_count;
  return extract_breakdown(g);
}

// ---------------------------------------------------------------------------
// Epoch loop with logging, checkpointing, and bit-exact resume.
// ---------------------------------------------------------------------------

template <class S>
struct TrainRun {
  TrainConfig cfg;
  ModelBundle<S> bundle;
  Adam<S> opt;
  Rng rng;
  LossBreakdown first, last;

  explicit TrainRun(const TrainConfig& c)
      : cfg(c),
        bundle(ModelBundle<S>::init(c.shape, c.rng_seed)),
        opt(AdamConfig{c.learning_rate, 0.9, 0.999, 1e-8, c.clip_norm}),
        rng(c.rng_seed ^ 0x747261696e726e67ull) {
    cfg.validate();
  }

  TrainRun(const TrainConfig& c, LoadedCheckpoint<S>&& ck)
      : cfg(c), bundle(std::move(ck.bundle)), opt(std::move(ck.optimizer)),
        rng(c.rng_seed ^ 0x747261696e726e67ull) {
    cfg.validate();
    require(ck.has_optimizer, "resume needs a checkpoint with optimizer state");
    require(ck.has_rng, "resume needs a checkpoint with the RNG snapshot");
    rng.restore(ck.rng);
  }
};

namespace train_detail {

inline void append_json_field(std::string& s, const char* key, double v) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), ",\"%s\":%.17g", key, v);
  s += buf;
}

inline std::string log_line(std::int64_t step, int epoch, std::size_t pair,
                            const TripleTime& tt, const LossBreakdown& b) {
  std::string s;
  char head[128];
  std::snprintf(head, sizeof(head), "{\"step\":%lld,\"epoch\":%d,\"pair\":%zu",
                static_cast<long long>(step), epoch, pair);
  s += head;
  append_json_field(s, "t1", tt.t1);
  append_json_field(s, "t2", tt.t2);
  append_json_field(s, "t3", tt.t3);
  append_json_field(s, "total", b.total);
  append_json_field(s, "smooth_fwd", b.smooth_fwd);
  append_json_field(s, "smooth_bwd", b.smooth_bwd);
  append_json_field(s, "image_fwd", b.image_fwd);
  append_json_field(s, "image_bwd", b.image_bwd);
  append_json_field(s, "cyc_image_0", b.cyc_image_0);
  append_json_field(s, "cyc_image_1", b.cyc_image_1);
  append_json_field(s, "reg_0", b.reg_0);
  append_json_field(s, "reg_1", b.reg_1);
  if (b.has_dice) {
    append_json_field(s, "dice_0", b.dice_0);
    append_json_field(s, "dice_1", b.dice_1);
  }
  s += '}';
  return s;
}

}  // namespace train_detail

// Runs the remaining epochs of `run` over the dataset. Writes
// `train_log.jsonl` and `checkpoints/epoch_####.ckpt` under out_dir when it
// is non-empty. Steps already recorded in bundle.step_count are skipped, so
// resuming a checkpoint replays nothing.
template <class S>
void train_epochs(TrainRun<S>& run,
                  const std::vector<std::pair<Volume<S>, Volume<S>>>& pairs,
                  const std::filesystem::path& out_dir = {}) {
  require(!pairs.empty(), "training dataset is empty");
  const auto n = static_cast<std::int64_t>(pairs.size());
  require(run.bundle.step_count % n == 0,
          "checkpoint was not taken at an epoch boundary");
  const int start_epoch = static_cast<int>(run.bundle.step_count / n);
  for (const auto& [a, b] : pairs) {
    S lo0, hi0, lo1, hi1;
    a.data.minmax(lo0, hi0);
    b.data.minmax(lo1, hi1);
    require(lo0 >= S(-0.001) && hi0 <= S(1.001) && lo1 >= S(-0.001) &&
                hi1 <= S(1.001),
            "training frames must be normalized to [0, 1]");
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir / "checkpoints");
    log.open(out_dir / "train_log.jsonl",
             start_epoch == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError(cat("cannot write log under ", out_dir.string()));
  }

  for (int epoch = start_epoch; epoch < run.cfg.epochs; ++epoch) {
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      // sample_times consumes the rng inside cycle_step; capture the draw by
      // peeking at a copy so the log can show it
      Rng peek = run.rng;
      const TripleTime tt = sample_times(peek, run.cfg.min_time_gap);
      LossBreakdown b = cycle_step(run.bundle, pairs[p].first, pairs[p].second,
                                   run.opt, run.cfg, run.rng);
      if (run.bundle.step_count == 1) run.first = b;
      run.last = b;
      if (log.is_open() &&
          (run.bundle.step_count - 1) % run.cfg.log_every == 0)
        log << train_detail::log_line(run.bundle.step_count, epoch, p, tt, b)
            << '\n';
    }
    if (!out_dir.empty() && run.cfg.checkpoint_every > 0 &&
        (epoch + 1) % run.cfg.checkpoint_every == 0 &&
        epoch + 1 < run.cfg.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch + 1);
      save_checkpoint(out_dir / "checkpoints" / name, run.bundle, run.cfg,
                      &run.opt, &run.rng);
    }
  }
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "checkpoints" / "final.ckpt", run.bundle,
                    run.cfg, &run.opt, &run.rng);
    if (log.is_open()) log.flush();
  }
}

template <class S>
TrainRun<S> train(const std::vector<std::pair<Volume<S>, Volume<S>>>& pairs,
                  const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {}) {
  TrainRun<S> run(cfg);
  train_epochs(run, pairs, out_dir);
  return run;
}

}  // namespace uvi
