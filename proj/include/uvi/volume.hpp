#pragma once
// Volumetric value types and the operations the rest of the library is built
// on: backward warping, field scaling / pyramid downscaling, weighted fusion,
// spatial gradients, trilinear resizing, and the UVIV file format.
//
// A Volume is (C, D, H, W) with width fastest; displacement fields are
// 3-channel volumes whose channels are the per-voxel offsets along depth,
// height and width, measured in voxels of their own grid.

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/tape.hpp"
#include "uvi/tensor.hpp"

namespace uvi {

template <class S = float>
struct Volume {
  Tensor<S> data;                       // (C, D, H, W)
  std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm per voxel (z, y, x)

  Volume() = default;
  explicit Volume(Tensor<S> t) : data(std::move(t)) {
    require(data.rank() == 4, "volume tensor must be rank 4");
  }
  Volume(int c, int d, int h, int w, S fill = S(0))
      : data(Tensor<S>({c, d, h, w}, fill)) {}

  int channels() const { return data.dim(0); }
  int depth() const { return data.dim(1); }
  int height() const { return data.dim(2); }
  int width() const { return data.dim(3); }
  bool same_grid(const Volume& o) const {
    return depth() == o.depth() && height() == o.height() && width() == o.width();
  }
};

template <class S = float>
struct DisplacementField {
  Tensor<S> data;  // (3, D, H, W)

  DisplacementField() = default;
  explicit DisplacementField(Tensor<S> t) : data(std::move(t)) {
    require(data.rank() == 4 && data.dim(0) == 3,
            "displacement field must have 3 channels");
  }
  DisplacementField(int d, int h, int w, S fill = S(0))
      : data(Tensor<S>({3, d, h, w}, fill)) {}

  int depth() const { return data.dim(1); }
  int height() const { return data.dim(2); }
  int width() const { return data.dim(3); }
};

// A point on the normalized acquisition axis: 0 and 1 are the observed
// endpoint frames, (0,1) interpolates, [-0.5,0) and (1,1.5] extrapolate.
struct TimeStamp {
  double t = 0.0;

  bool interpolates() const { return t >= 0.0 && t <= 1.0; }
  bool extrapolates() const {
    return (t >= -0.5 && t < 0.0) || (t > 1.0 && t <= 1.5);
  }
  bool reachable() const { return t >= -0.5 && t <= 1.5; }
};

// ---------------------------------------------------------------------------
// Core field/volume operations (non-autodiff entry points; the tape ops are
// the single implementation underneath).
// ---------------------------------------------------------------------------

template <class S>
Volume<S> warp(const Volume<S>& vol, const DisplacementField<S>& field) {
  require(vol.depth() == field.depth() && vol.height() == field.height() &&
              vol.width() == field.width(),
          "warp: volume and field grids differ");
  const std::size_t fn = field.data.numel();
  for (std::size_t i = 0; i < fn; ++i)
    require(std::isfinite(static_cast<double>(field.data[i])),
            "warp: non-finite displacement component");
  Tape<S> t;
  auto* v = t.constant(vol.data);
  auto* f = t.constant(field.data);
  Volume<S> out(t.warp(v, f)->value);
  out.spacing = vol.spacing;
  return out;
}

template <class S>
DisplacementField<S> scale_field(const DisplacementField<S>& f, S k) {
  DisplacementField<S> out(Tensor<S>::like(f.data));
  const std::size_t n = f.data.numel();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = k * f.data[i];
  return out;
}

// Trilinear resize of each channel to the target grid; when the grid shrinks
// or grows, displacement magnitudes are rescaled per axis so the field keeps
// pointing at the same physical locations.
template <class S>
DisplacementField<S> resize_field(const DisplacementField<S>& f, int d2, int h2,
                                  int w2) {
  Tape<S> t;
  auto* n = t.resize(t.constant(f.data), d2, h2, w2);
  Tensor<S> out = n->value;
  const S rz = static_cast<S>(static_cast<double>(d2) / f.depth());
  const S ry = static_cast<S>(static_cast<double>(h2) / f.height());
  const S rx = static_cast<S>(static_cast<double>(w2) / f.width());
  const std::size_t plane = out.plane();
  for (std::size_t i = 0; i < plane; ++i) out[i] *= rz;
  for (std::size_t i = 0; i < plane; ++i) out[plane + i] *= ry;
  for (std::size_t i = 0; i < plane; ++i) out[2 * plane + i] *= rx;
  return DisplacementField<S>(std::move(out));
}

// Halve the field resolution: used to carry a full-resolution flow down a
// feature pyramid. Displacements are halved with the grid.
template <class S>
DisplacementField<S> downscale_field(const DisplacementField<S>& f) {
  require(f.depth() % 2 == 0 && f.height() % 2 == 0 && f.width() % 2 == 0,
          "downscale_field: dims must be even");
  return resize_field(f, f.depth() / 2, f.height() / 2, f.width() / 2);
}

// General pyramid step: shrink by an integer denominator in {1, 2, 4} in one
// resample (two successive halvings would smooth twice).
template <class S>
DisplacementField<S> downscale_field(const DisplacementField<S>& f, int denom) {
  require(denom == 1 || denom == 2 || denom == 4,
          "downscale_field: denominator must be 1, 2, or 4");
  if (denom == 1) return f;
  require(f.depth() % denom == 0 && f.height() % denom == 0 &&
              f.width() % denom == 0,
          "downscale_field: dims not divisible by the denominator");
  return resize_field(f, f.depth() / denom, f.height() / denom,
                      f.width() / denom);
}

// w0*a + w1*b, elementwise, with the products formed independently so the
// operation commutes bitwise under (a,w0) <-> (b,w1). Weights are a convex
// pair: non-negative and summing to 1.
template <class S>
Volume<S> weighted_fuse(const Volume<S>& a, const Volume<S>& b, S w0, S w1) {
  require(a.data.same_shape(b.data), "weighted_fuse: shape mismatch");
  require(w0 >= S(0) && w1 >= S(0), "weighted_fuse: negative weight");
  require(std::abs(static_cast<double>(w0) + static_cast<double>(w1) - 1.0) <=
              1e-9,
          "weighted_fuse: weights must sum to 1");
  Volume<S> out(Tensor<S>::like(a.data));
  out.spacing = a.spacing;
  const std::size_t n = a.data.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const S pa = w0 * a.data[i];
    const S pb = w1 * b.data[i];
    out.data[i] = pa + pb;
  }
  return out;
}

// Forward-difference gradients of a displacement field, one tensor per axis
// (depth, height, width). Each output is one slice shorter along its own axis
// and keeps all three field components; no padding is invented.
template <class S>
std::array<Tensor<S>, 3> spatial_gradient(const DisplacementField<S>& f) {
  require(f.depth() >= 2 && f.height() >= 2 && f.width() >= 2,
          "spatial_gradient: every axis needs at least 2 voxels");
  Tape<S> t;
  auto* v = t.constant(f.data);
  std::array<Tensor<S>, 3> out;
  for (int axis = 1; axis <= 3; ++axis)
    out[static_cast<std::size_t>(axis - 1)] = t.axis_diff(v, axis)->value;
  return out;
}

template <class S>
Volume<S> resize_volume(const Volume<S>& vol, int d2, int h2, int w2) {
  require(d2 >= 2 && h2 >= 2 && w2 >= 2,
          "resize_volume: target needs at least 2 voxels per axis");
  Tape<S> t;
  auto* n = t.resize(t.constant(vol.data), d2, h2, w2);
  Volume<S> out(n->value);
  out.spacing = {vol.spacing[0] * static_cast<float>(vol.depth()) / d2,
                 vol.spacing[1] * static_cast<float>(vol.height()) / h2,
                 vol.spacing[2] * static_cast<float>(vol.width()) / w2};
  return out;
}

// ---------------------------------------------------------------------------
// UVIV file format: "UVIV" | u8 version=1 | u8 dtype=1 (float32 LE) |
// u16 channels | u32 D | u32 H | u32 W | 3x f32 spacing | payload
// (channel-major, depth slowest within channel).
// ---------------------------------------------------------------------------

namespace uviv_detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& s, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(s, bits);
}

}  // namespace uviv_detail

template <class S>
void write_uviv(const std::filesystem::path& path, const Volume<S>& vol) {
  static_assert(std::endian::native == std::endian::little,
                "UVIV writer assumes a little-endian host");
  require(vol.channels() <= 0xffff, "write_uviv: too many channels");
  std::string header;
  header += "UVIV";
  header.push_back(1);  // version
  header.push_back(1);  // dtype: float32
  uviv_detail::put_u16(header, static_cast<std::uint16_t>(vol.channels()));
  uviv_detail::put_u32(header, static_cast<std::uint32_t>(vol.depth()));
  uviv_detail::put_u32(header, static_cast<std::uint32_t>(vol.height()));
  uviv_detail::put_u32(header, static_cast<std::uint32_t>(vol.width()));
  for (int i = 0; i < 3; ++i) uviv_detail::put_f32(header, vol.spacing[i]);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open for writing: ", path.string()));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  const std::size_t n = vol.data.numel();
  if constexpr (std::is_same_v<S, float>) {
    f.write(reinterpret_cast<const char*>(vol.data.data()),
            static_cast<std::streamsize>(n * 4));
  } else {
    std::vector<float> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(vol.data[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(n * 4));
  }
  if (!f) throw IoError(cat("write failed: ", path.string()));
}

template <class S = float>
Volume<S> read_uviv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open: ", path.string()));
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "UVIV", 4) != 0)
    throw IoError(cat("not a UVIV file: ", path.string()));
  unsigned char vd[2];
  f.read(reinterpret_cast<char*>(vd), 2);
  if (!f || vd[0] != 1) throw IoError(cat("unsupported UVIV version: ", path.string()));
  if (vd[1] != 1) throw IoError(cat("unsupported UVIV dtype: ", path.string()));
  unsigned char hdr[2 + 12 + 12];
  f.read(reinterpret_cast<char*>(hdr), sizeof(hdr));
  if (!f) throw IoError(cat("truncated UVIV header: ", path.string()));
  const auto u16 = [&](int off) {
    return static_cast<std::uint32_t>(hdr[off]) |
           (static_cast<std::uint32_t>(hdr[off + 1]) << 8);
  };
  const auto u32 = [&](int off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | hdr[off + i];
    return v;
  };
  const std::uint32_t C = u16(0), D = u32(2), H = u32(6), W = u32(10);
  if (C == 0 || D == 0 || H == 0 || W == 0)
    throw IoError(cat("degenerate UVIV dims: ", path.string()));
  const std::uint64_t n64 = static_cast<std::uint64_t>(C) * D * H * W;
  if (n64 > (1ull << 33))
    throw IoError(cat("UVIV payload implausibly large: ", path.string()));
  Volume<S> vol(static_cast<int>(C), static_cast<int>(D), static_cast<int>(H),
                static_cast<int>(W));
  for (int i = 0; i < 3; ++i) {  // spacing floats start at hdr offset 14
    const std::uint32_t bits = u32(14 + 4 * i);
    std::memcpy(&vol.spacing[static_cast<std::size_t>(i)], &bits, 4);
  }
  const std::size_t n = static_cast<std::size_t>(n64);
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
  if (!f) throw IoError(cat("truncated UVIV payload: ", path.string()));
  for (std::size_t i = 0; i < n; ++i) vol.data[i] = static_cast<S>(buf[i]);
  return vol;
}

}  // namespace uvi
