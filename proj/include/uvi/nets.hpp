#pragma once
// The three parametric models: a UNet that predicts displacement fields from a
// 2-channel frame pair, a small multi-scale feature extractor, and a
// reconstruction UNet that refines a fused frame with a residual correction.
//
// Parameters live in master Tensors owned by the net objects. Each training
// step binds them once onto a Tape as leaves; repeated invocations of a net in
// the same graph (the flow net runs up to six times per step) accumulate
// gradients into the same leaves. Value-level wrappers on ModelBundle run the
// same graphs with needs_grad=false for inference.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/rng.hpp"
#include "uvi/tape.hpp"
#include "uvi/tensor.hpp"
#include "uvi/volume.hpp"

namespace uvi {

enum class FeatureMode { multi_scale_cnn, none, edge, unet, single_scale };

inline const char* to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::multi_scale_cnn: return "multi_scale_cnn";
    case FeatureMode::none: return "none";
    case FeatureMode::edge: return "edge";
    case FeatureMode::unet: return "unet";
    case FeatureMode::single_scale: return "single_scale";
  }
  return "?";
}

inline FeatureMode feature_mode_from_string(std::string_view s) {
  if (s == "multi_scale_cnn") return FeatureMode::multi_scale_cnn;
  if (s == "none") return FeatureMode::none;
  if (s == "edge") return FeatureMode::edge;
  if (s == "unet") return FeatureMode::unet;
  if (s == "single_scale") return FeatureMode::single_scale;
  throw ContractViolation(cat("unknown feature mode: ", s));
}

// Channel count of each pyramid level (scales 1, 1/2, 1/4) for a mode.
inline std::array<int, 3> feature_channels(FeatureMode m) {
  switch (m) {
    case FeatureMode::multi_scale_cnn: return {4, 8, 16};
    case FeatureMode::none: return {0, 0, 0};
    case FeatureMode::edge: return {1, 1, 1};
    case FeatureMode::unet: return {4, 8, 16};
    case FeatureMode::single_scale: return {4, 0, 0};
  }
  return {0, 0, 0};
}

// Channel widths of the networks. Defaults are the full-size models; tests and
// quick experiments shrink them.
struct NetShape {
  std::array<int, 4> flow_enc{16, 32, 32, 32};
  std::array<int, 7> flow_dec{32, 32, 32, 32, 32, 16, 16};
  int recon_base = 16;
  FeatureMode feature_mode = FeatureMode::multi_scale_cnn;

  friend bool operator==(const NetShape&, const NetShape&) = default;
};

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S>* value;
};

// Master tensor <-> tape leaf pairs for one bound step; the optimizer reads
// gradients off the nodes and writes updates into the masters.
template <class S>
using BindList = std::vector<std::pair<Tensor<S>*, Node<S>*>>;

// ---------------------------------------------------------------------------
// One 3x3x3 conv layer's parameters.
// ---------------------------------------------------------------------------

template <class S>
class Conv3d {
 public:
  Tensor<S> w, b;
  int stride = 1;

  Conv3d() = default;
  Conv3d(int cin, int cout, int stride_, Rng& rng, bool zero_init = false)
      : w({cout, cin, 3, 3, 3}), b({cout}), stride(stride_) {
    b.fill(S(0));
    if (zero_init) {
      w.fill(S(0));
    } else {
      // He-uniform sized for LeakyReLU(0.2).
      const double fan_in = 27.0 * cin;
      const double gain_sq = 2.0 / (1.0 + 0.2 * 0.2);
      const double bound = std::sqrt(3.0 * gain_sq / fan_in);
      for (std::size_t i = 0; i < w.numel(); ++i)
        w[i] = static_cast<S>(rng.uniform(-bound, bound));
    }
  }

  struct Bound {
    Node<S>* w = nullptr;
    Node<S>* b = nullptr;
    int stride = 1;
    Node<S>* operator()(Tape<S>& t, Node<S>* x) const {
      return t.conv3d(x, w, b, stride);
    }
  };

  Bound bind(Tape<S>& t, bool needs_grad, BindList<S>* reg) {
    Node<S>* wn = t.leaf(w, needs_grad);
    Node<S>* bn = t.leaf(b, needs_grad);
    if (reg) {
      reg->push_back({&w, wn});
      reg->push_back({&b, bn});
    }
    return {wn, bn, stride};
  }

  void visit(const std::string& prefix, std::vector<ParamRef<S>>& out) {
    out.push_back({prefix + ".w", &w});
    out.push_back({prefix + ".b", &b});
  }

  std::size_t param_count() const { return w.numel() + b.numel(); }
};

// ---------------------------------------------------------------------------
// Flow network: UNet over the 2-channel concatenation of a frame pair.
// ---------------------------------------------------------------------------

template <class S>
class FlowNet {
 public:
  std::array<Conv3d<S>, 4> enc;  // stride-2, scales 1/2 .. 1/16
  std::array<Conv3d<S>, 7> dec;  // bottleneck + 4 up/skip levels + 2 refine
  Conv3d<S> head;                // 3 flow channels, zero-initialized

  FlowNet() = default;
  FlowNet(const NetShape& shape, Rng& rng) {
    const auto& e = shape.flow_enc;
    const auto& d = shape.flow_dec;
    enc[0] = Conv3d<S>(2, e[0], 2, rng);
    enc[1] = Conv3d<S>(e[0], e[1], 2, rng);
    enc[2] = Conv3d<S>(e[1], e[2], 2, rng);
    enc[3] = Conv3d<S>(e[2], e[3], 2, rng);
    dec[0] = Conv3d<S>(e[3], d[0], 1, rng);
    dec[1] = Conv3d<S>(d[0] + e[2], d[1], 1, rng);
    dec[2] = Conv3d<S>(d[1] + e[1], d[2], 1, rng);
    dec[3] = Conv3d<S>(d[2] + e[0], d[3], 1, rng);
    dec[4] = Conv3d<S>(d[3] + 2, d[4], 1, rng);
    dec[5] = Conv3d<S>(d[4], d[5], 1, rng);
    dec[6] = Conv3d<S>(d[5], d[6], 1, rng);
    head = Conv3d<S>(d[6], 3, 1, rng, /*zero_init=*/true);
  }

  struct Bound {
    std::array<typename Conv3d<S>::Bound, 4> enc;
    std::array<typename Conv3d<S>::Bound, 7> dec;
    typename Conv3d<S>::Bound head;

    // x: the 2-channel concatenation of the two frames. Returns a 3-channel
    // displacement field at input resolution.
    Node<S>* operator()(Tape<S>& t, Node<S>* x) const {
      require(x->value.dim(1) % 16 == 0 && x->value.dim(2) % 16 == 0 &&
                  x->value.dim(3) % 16 == 0,
              "flow net needs spatial dims divisible by 16");
      auto act = [&](Node<S>* n) { return t.leaky_relu(n, S(0.2)); };
      Node<S>* e0 = act(enc[0](t, x));
      Node<S>* e1 = act(enc[1](t, e0));
      Node<S>* e2 = act(enc[2](t, e1));
      Node<S>* e3 = act(enc[3](t, e2));
      Node<S>* d = act(dec[0](t, e3));
      d = act(dec[1](t, t.concat(t.upsample2(d), e2)));
      d = act(dec[2](t, t.concat(t.upsample2(d), e1)));
      d = act(dec[3](t, t.concat(t.upsample2(d), e0)));
      d = act(dec[4](t, t.concat(t.upsample2(d), x)));
      d = act(dec[5](t, d));
      d = act(dec[6](t, d));
      return head(t, d);
    }

    // Two swapped passes; exchanging i0/i1 exchanges the outputs exactly.
    std::pair<Node<S>*, Node<S>*> flows(Tape<S>& t, Node<S>* i0,
                                        Node<S>* i1) const {
      Node<S>* f01 = (*this)(t, t.concat(i0, i1));
      Node<S>* f10 = (*this)(t, t.concat(i1, i0));
      return {f01, f10};
    }
  };

  Bound bind(Tape<S>& t, bool needs_grad, BindList<S>* reg) {
    Bound bd;
    for (int i = 0; i < 4; ++i) bd.enc[i] = enc[i].bind(t, needs_grad, reg);
    for (int i = 0; i < 7; ++i) bd.dec[i] = dec[i].bind(t, needs_grad, reg);
    bd.head = head.bind(t, needs_grad, reg);
    return bd;
  }

  void visit(std::vector<ParamRef<S>>& out) {
    for (int i = 0; i < 4; ++i) enc[i].visit(cat("flow.enc", i), out);
    for (int i = 0; i < 7; ++i) dec[i].visit(cat("flow.dec", i), out);
    head.visit("flow.head", out);
  }
};

// ---------------------------------------------------------------------------
// Feature extractor: 3-level pyramid at scales 1, 1/2, 1/4.
// ---------------------------------------------------------------------------

template <class S>
struct FeaturePyramid {
  std::array<Tensor<S>, 3> levels;
  std::array<int, 3> channels{0, 0, 0};
};

template <class S>
struct BoundPyramid {
  std::array<Node<S>*, 3> levels{nullptr, nullptr, nullptr};
  std::array<int, 3> channels{0, 0, 0};
};

template <class S>
class FeatureExtractor {
 public:
  FeatureMode mode = FeatureMode::multi_scale_cnn;
  Conv3d<S> c0, c1, c2;  // encoder path (also the whole multi_scale_cnn)
  Conv3d<S> u1, u0;      // decoder convs for the unet mode

  FeatureExtractor() = default;
  FeatureExtractor(FeatureMode m, Rng& rng) : mode(m) {
    switch (m) {
      case FeatureMode::multi_scale_cnn:
        c0 = Conv3d<S>(1, 4, 1, rng);
        c1 = Conv3d<S>(4, 8, 2, rng);
        c2 = Conv3d<S>(8, 16, 2, rng);
        break;
      case FeatureMode::unet:
        c0 = Conv3d<S>(1, 4, 1, rng);
        c1 = Conv3d<S>(4, 8, 2, rng);
        c2 = Conv3d<S>(8, 16, 2, rng);
        u1 = Conv3d<S>(16 + 8, 8, 1, rng);
        u0 = Conv3d<S>(8 + 4, 4, 1, rng);
        break;
      case FeatureMode::single_scale:
        c0 = Conv3d<S>(1, 4, 1, rng);
        break;
      case FeatureMode::none:
      case FeatureMode::edge:
        break;  // no parameters
    }
  }

  struct Bound {
    FeatureMode mode = FeatureMode::multi_scale_cnn;
    typename Conv3d<S>::Bound c0, c1, c2, u1, u0;

    BoundPyramid<S> operator()(Tape<S>& t, Node<S>* v) const {
      require(v->value.dim(0) == 1, "feature extractor wants 1 channel");
      if (mode != FeatureMode::none && mode != FeatureMode::single_scale)
        require(v->value.dim(1) % 4 == 0 && v->value.dim(2) % 4 == 0 &&
                    v->value.dim(3) % 4 == 0,
                "feature extractor needs spatial dims divisible by 4");
      auto act = [&](Node<S>* n) { return t.leaky_relu(n, S(0.2)); };
      BoundPyramid<S> p;
      p.channels = feature_channels(mode);
      switch (mode) {
        case FeatureMode::none:
          break;
        case FeatureMode::single_scale:
          p.levels[0] = act(c0(t, v));
          break;
        case FeatureMode::multi_scale_cnn: {
          p.levels[0] = act(c0(t, v));
          p.levels[1] = act(c1(t, p.levels[0]));
          p.levels[2] = act(c2(t, p.levels[1]));
          break;
        }
        case FeatureMode::unet: {
          Node<S>* e0 = act(c0(t, v));
          Node<S>* e1 = act(c1(t, e0));
          Node<S>* e2 = act(c2(t, e1));
          Node<S>* p1 = act(u1(t, t.concat(t.upsample2(e2), e1)));
          Node<S>* p0 = act(u0(t, t.concat(t.upsample2(p1), e0)));
          p.levels = {p0, p1, e2};
          break;
        }
        case FeatureMode::edge: {
          const int D = v->value.dim(1), H = v->value.dim(2),
                    W = v->value.dim(3);
          auto edge_mag = [&](Node<S>* x) {
            Node<S>* gz = t.central_diff(x, 1);
            Node<S>* gy = t.central_diff(x, 2);
            Node<S>* gx = t.central_diff(x, 3);
            Node<S>* sq = t.add(t.add(t.mul(gz, gz), t.mul(gy, gy)),
                                t.mul(gx, gx));
            return t.sqrt_op(t.add_scalar(sq, S(1e-12)));
          };
          p.levels[0] = edge_mag(v);
          Node<S>* h = t.resize(v, D / 2, H / 2, W / 2);
          p.levels[1] = edge_mag(h);
          p.levels[2] = edge_mag(t.resize(h, D / 4, H / 4, W / 4));
          break;
        }
      }
      return p;
    }
  };

  Bound bind(Tape<S>& t, bool needs_grad, BindList<S>* reg) {
    Bound bd;
    bd.mode = mode;
    if (mode == FeatureMode::multi_scale_cnn || mode == FeatureMode::unet ||
        mode == FeatureMode::single_scale)
      bd.c0 = c0.bind(t, needs_grad, reg);
    if (mode == FeatureMode::multi_scale_cnn || mode == FeatureMode::unet) {
      bd.c1 = c1.bind(t, needs_grad, reg);
      bd.c2 = c2.bind(t, needs_grad, reg);
    }
    if (mode == FeatureMode::unet) {
      bd.u1 = u1.bind(t, needs_grad, reg);
      bd.u0 = u0.bind(t, needs_grad, reg);
    }
    return bd;
  }

  void visit(std::vector<ParamRef<S>>& out) {
    if (mode == FeatureMode::multi_scale_cnn || mode == FeatureMode::unet ||
        mode == FeatureMode::single_scale)
      c0.visit("feat.c0", out);
    if (mode == FeatureMode::multi_scale_cnn || mode == FeatureMode::unet) {
      c1.visit("feat.c1", out);
      c2.visit("feat.c2", out);
    }
    if (mode == FeatureMode::unet) {
      u1.visit("feat.u1", out);
      u0.visit("feat.u0", out);
    }
  }
};

// ---------------------------------------------------------------------------
// Reconstruction network: small UNet refining a fused frame with the two
// warped feature pyramids concatenated at matching scales.
// ---------------------------------------------------------------------------

template <class S>
class ReconNet {
 public:
  int base = 16;
  std::array<int, 3> feat_ch{4, 8, 16};
  Conv3d<S> e0, e1, e2, d0, d1, head;

  ReconNet() = default;
  ReconNet(const NetShape& shape, Rng& rng)
      : base(shape.recon_base), feat_ch(feature_channels(shape.feature_mode)) {
    const int b = base;
    e0 = Conv3d<S>(1 + 2 * feat_ch[0], b, 1, rng);
    e1 = Conv3d<S>(b, 2 * b, 2, rng);
    e2 = Conv3d<S>(2 * b + 2 * feat_ch[1], 4 * b, 2, rng);
    d0 = Conv3d<S>(6 * b + 2 * feat_ch[2] + 2 * feat_ch[1], 2 * b, 1, rng);
    d1 = Conv3d<S>(3 * b, b, 1, rng);
    head = Conv3d<S>(b, 1, 1, rng, /*zero_init=*/true);
  }

  struct Bound {
    typename Conv3d<S>::Bound e0, e1, e2, d0, d1, head;

    // Single (asymmetric) pass: encoder concatenates pyramid levels at their
    // native scales, decoder mirrors with skip connections.
    Node<S>* residual_once(Tape<S>& t, Node<S>* fused,
                           const BoundPyramid<S>& a,
                           const BoundPyramid<S>& b) const {
      auto act = [&](Node<S>* n) { return t.leaky_relu(n, S(0.2)); };
      auto cat3 = [&](Node<S>* x, Node<S>* fa, Node<S>* fb) {
        if (!fa) return x;
        return t.concat(t.concat(x, fa), fb);
      };
      Node<S>* x0 = cat3(fused, a.levels[0], b.levels[0]);
      Node<S>* t0 = act(e0(t, x0));
      Node<S>* t1 = cat3(act(e1(t, t0)), a.levels[1], b.levels[1]);
      Node<S>* t2 = cat3(act(e2(t, t1)), a.levels[2], b.levels[2]);
      Node<S>* u = act(d0(t, t.concat(t.upsample2(t2), t1)));
      u = act(d1(t, t.concat(t.upsample2(u), t0)));
      return head(t, u);
    }

    // Symmetrized refinement: averaging the two pyramid orders makes the
    // output exactly invariant under exchanging the pyramids, which the
    // frame-swap symmetry of the whole pipeline needs. Returns (out, residual)
    // with out defined as fused + residual.
    std::pair<Node<S>*, Node<S>*> operator()(Tape<S>& t, Node<S>* fused,
                                             const BoundPyramid<S>& a,
                                             const BoundPyramid<S>& b) const {
      require(fused->value.dim(0) == 1, "recon wants a 1-channel fused frame");
      require(fused->value.dim(1) % 4 == 0 && fused->value.dim(2) % 4 == 0 &&
                  fused->value.dim(3) % 4 == 0,
              "recon needs spatial dims divisible by 4");
      Node<S>* r1 = residual_once(t, fused, a, b);
      Node<S>* r2 = residual_once(t, fused, b, a);
      Node<S>* r = t.fuse(r1, r2, S(0.5), S(0.5));
      Node<S>* out = t.add(fused, r);
      return {out, r};
    }
  };

  Bound bind(Tape<S>& t, bool needs_grad, BindList<S>* reg) {
    Bound bd;
    bd.e0 = e0.bind(t, needs_grad, reg);
    bd.e1 = e1.bind(t, needs_grad, reg);
    bd.e2 = e2.bind(t, needs_grad, reg);
    bd.d0 = d0.bind(t, needs_grad, reg);
    bd.d1 = d1.bind(t, needs_grad, reg);
    bd.head = head.bind(t, needs_grad, reg);
    return bd;
  }

  void visit(std::vector<ParamRef<S>>& out) {
    e0.visit("recon.e0", out);
    e1.visit("recon.e1", out);
    e2.visit("recon.e2", out);
    d0.visit("recon.d0", out);
    d1.visit("recon.d1", out);
    head.visit("recon.head", out);
  }
};

// ---------------------------------------------------------------------------
// Bundle of the three models.
// ---------------------------------------------------------------------------

template <class S>
struct BundleBound {
  typename FlowNet<S>::Bound flow;
  typename FeatureExtractor<S>::Bound feat;
  typename ReconNet<S>::Bound recon;
};

template <class S>
struct ModelBundle {
  NetShape shape;
  FlowNet<S> flow;
  FeatureExtractor<S> feat;
  ReconNet<S> recon;
  std::int64_t step_count = 0;
  std::uint64_t rng_seed = 0;

  static ModelBundle init(const NetShape& shape, std::uint64_t seed) {
    Rng rng(seed);
    ModelBundle m;
    m.shape = shape;
    m.rng_seed = seed;
    m.flow = FlowNet<S>(shape, rng);
    m.feat = FeatureExtractor<S>(shape.feature_mode, rng);
    m.recon = ReconNet<S>(shape, rng);
    return m;
  }

  std::vector<ParamRef<S>> params() {
    std::vector<ParamRef<S>> out;
    flow.visit(out);
    feat.visit(out);
    recon.visit(out);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.value->numel();
    return n;
  }

  BundleBound<S> bind(Tape<S>& t, bool needs_grad, BindList<S>* reg) {
    return {flow.bind(t, needs_grad, reg), feat.bind(t, needs_grad, reg),
            recon.bind(t, needs_grad, reg)};
  }

  // ---- value-level (inference) passes --------------------------------------

  std::pair<DisplacementField<S>, DisplacementField<S>> flow_forward(
      const Volume<S>& i0, const Volume<S>& i1) {
    require(i0.data.dim(0) == 1 && i1.data.dim(0) == 1 &&
                i0.data.same_shape(i1.data),
            "flow_forward wants two matching 1-channel volumes");
    Tape<S> t;
    auto fb = flow.bind(t, false, nullptr);
    Node<S>* n0 = t.constant(i0.data);
    Node<S>* n1 = t.constant(i1.data);
    auto [f01, f10] = fb.flows(t, n0, n1);
    DisplacementField<S> a, b;
    a.data = f01->value;
    b.data = f10->value;
    return {std::move(a), std::move(b)};
  }

  FeaturePyramid<S> feature_forward(const Volume<S>& v) {
    Tape<S> t;
    auto fb = feat.bind(t, false, nullptr);
    BoundPyramid<S> bp = fb(t, t.constant(v.data));
    FeaturePyramid<S> p;
    p.channels = bp.channels;
    for (int k = 0; k < 3; ++k)
      if (bp.levels[k]) p.levels[k] = bp.levels[k]->value;
    return p;
  }

  std::pair<Volume<S>, Volume<S>> recon_forward(const Volume<S>& fused,
                                                const FeaturePyramid<S>& a,
                                                const FeaturePyramid<S>& b) {
    require(a.channels == b.channels, "pyramid channel mismatch");
    Tape<S> t;
    auto rb = recon.bind(t, false, nullptr);
    BoundPyramid<S> pa, pb;
    pa.channels = a.channels;
    pb.channels = b.channels;
    for (int k = 0; k < 3; ++k) {
      if (a.channels[k] > 0) {
        pa.levels[k] = t.constant(a.levels[k]);
        pb.levels[k] = t.constant(b.levels[k]);
      }
    }
    auto [out, res] = rb(t, t.constant(fused.data), pa, pb);
    Volume<S> vo, vr;
    vo.data = out->value;
    vr.data = res->value;
    vo.spacing = fused.spacing;
    vr.spacing = fused.spacing;
    return {std::move(vo), std::move(vr)};
  }
};

}  // namespace uvi
