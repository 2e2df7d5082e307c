#pragma once
// Versioned binary checkpoint: the canonical config text plus its hash, the
// bundle's parameter tensors by name, optional Adam moments, and optionally
// the training RNG snapshot. Everything needed to resume a run bit-exactly.
// No timestamps or host info: identical runs produce identical files.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/config.hpp"
#include "uvi/nets.hpp"
#include "uvi/optimizer.hpp"
#include "uvi/rng.hpp"
#include "uvi/tensor.hpp"

namespace uvi {

namespace ckpt_detail {

inline void put_u8(std::string& s, std::uint8_t v) {
  s.push_back(static_cast<char>(v));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& s, std::int64_t v) {
  put_u64(s, static_cast<std::uint64_t>(v));
}

template <class S>
void put_tensor_payload(std::string& s, const Tensor<S>& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(s, bits);
  }
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError(cat("truncated checkpoint: ", where));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 1; i >= 0; --i)
      v = static_cast<std::uint16_t>((v << 8) | static_cast<std::uint8_t>(buf[pos + i]));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(buf[pos + i]);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(buf[pos + i]);
    pos += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = buf.substr(pos, n);
    pos += n;
    return out;
  }
  template <class S>
  void tensor_payload(Tensor<S>& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const std::uint32_t bits = u32();
      float f;
      std::memcpy(&f, &bits, 4);
      t[i] = static_cast<S>(f);
    }
  }
};

inline void put_rng(std::string& s, const Rng::Snapshot& snap) {
  for (int i = 0; i < 4; ++i) put_u64(s, snap.state[i]);
  put_u8(s, snap.has_cached_normal);
  put_u64(s, snap.cached_normal_bits);
}

inline Rng::Snapshot read_rng(Reader& r) {
  Rng::Snapshot snap;
  for (int i = 0; i < 4; ++i) snap.state[i] = r.u64();
  snap.has_cached_normal = r.u8();
  snap.cached_normal_bits = r.u64();
  return snap;
}

}  // namespace ckpt_detail

// Pass optimizer/rng as null to save a bundle-only checkpoint (inference use).
template <class S>
void save_checkpoint(const std::filesystem::path& path, ModelBundle<S>& bundle,
                     const TrainConfig& cfg, Adam<S>* opt = nullptr,
                     const Rng* rng = nullptr) {
  using namespace ckpt_detail;
  const std::string cfg_text = cfg.canonical_text();
  std::string out;
  out += "UVIC";
  put_u8(out, 1);  // version
  put_u8(out, 1);  // dtype: float32
  put_u64(out, fnv1a64(cfg_text));
  put_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
  out += cfg_text;
  put_u64(out, bundle.rng_seed);
  put_i64(out, bundle.step_count);

  put_u8(out, rng ? 1 : 0);
  if (rng) put_rng(out, rng->snapshot());

  auto params = bundle.params();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    require(p.name.size() <= 0xffff, "parameter name too long");
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    put_u8(out, static_cast<std::uint8_t>(p.value->rank()));
    for (int d = 0; d < p.value->rank(); ++d)
      put_u32(out, static_cast<std::uint32_t>(p.value->dim(d)));
    put_tensor_payload(out, *p.value);
  }

  put_u8(out, opt ? 1 : 0);
  if (opt) {
    require(opt->exp_avg().size() == params.size() || opt->exp_avg().empty(),
            "optimizer state does not match the bundle");
    put_i64(out, opt->steps());
    put_u8(out, opt->exp_avg().empty() ? 0 : 1);
    if (!opt->exp_avg().empty()) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        put_tensor_payload(out, opt->exp_avg()[k]);
        put_tensor_payload(out, opt->exp_avg_sq()[k]);
      }
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open for writing: ", path.string()));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError(cat("write failed: ", path.string()));
}

template <class S>
struct LoadedCheckpoint {
  TrainConfig config;
  ModelBundle<S> bundle;
  Adam<S> optimizer;
  bool has_optimizer = false;
  bool has_rng = false;
  Rng::Snapshot rng{};
};

// `expect`: the config the caller intends to run with; a hash mismatch throws
// unless force is set. Pass null to accept whatever the file holds.
template <class S = float>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path,
                                    const TrainConfig* expect = nullptr,
                                    bool force = false) {
  using namespace ckpt_detail;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open: ", path.string()));
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf, 0, path.string()};

  if (r.bytes(4) != "UVIC") throw IoError(cat("not a UVIC file: ", path.string()));
  if (r.u8() != 1) throw IoError(cat("unsupported UVIC version: ", path.string()));
  if (r.u8() != 1) throw IoError(cat("unsupported UVIC dtype: ", path.string()));
  const std::uint64_t stored_hash = r.u64();
  const std::uint32_t cfg_len = r.u32();
  const std::string cfg_text = r.bytes(cfg_len);
  if (fnv1a64(cfg_text) != stored_hash)
    throw IoError(cat("checkpoint config hash does not match its text: ",
                      path.string()));
  if (expect && expect->hash() != stored_hash && !force)
    throw ContractViolation(
        cat("checkpoint was written with a different config (hash ",
            hex64(stored_hash), " vs ", hex64(expect->hash()),
            "); pass force to override"));

  LoadedCheckpoint<S> out;
  out.config = TrainConfig::parse(cfg_text);
  const std::uint64_t seed = r.u64();
  const std::int64_t step_count = r.i64();
  if (r.u8()) {
    out.has_rng = true;
    out.rng = read_rng(r);
  }

  out.bundle = ModelBundle<S>::init(out.config.shape, seed);
  out.bundle.step_count = step_count;
  auto params = out.bundle.params();
  const std::uint32_t n = r.u32();
  if (n != params.size())
    throw IoError(cat("checkpoint parameter count mismatch: ", path.string()));
  for (auto& p : params) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len);
    if (name != p.name)
      throw IoError(cat("checkpoint parameter order mismatch at ", p.name,
                        " vs ", name));
    const std::uint8_t rank = r.u8();
    if (rank != p.value->rank())
      throw IoError(cat("checkpoint rank mismatch at ", p.name));
    for (int d = 0; d < rank; ++d)
      if (r.u32() != static_cast<std::uint32_t>(p.value->dim(d)))
        throw IoError(cat("checkpoint shape mismatch at ", p.name));
    r.tensor_payload(*p.value);
  }

  if (r.u8()) {
    out.has_optimizer = true;
    AdamConfig ac;
    ac.lr = out.config.learning_rate;
    ac.clip_norm = out.config.clip_norm;
    out.optimizer = Adam<S>(ac);
    out.optimizer.set_steps(r.i64());
    if (r.u8()) {
      auto& m = out.optimizer.exp_avg();
      auto& v = out.optimizer.exp_avg_sq();
      for (auto& p : params) {
        Tensor<S> mt = Tensor<S>::like(*p.value);
        Tensor<S> vt = Tensor<S>::like(*p.value);
        r.tensor_payload(mt);
        r.tensor_payload(vt);
        m.push_back(std::move(mt));
        v.push_back(std::move(vt));
      }
    }
  }
  if (r.pos != buf.size())
    throw IoError(cat("trailing bytes in checkpoint: ", path.string()));
  return out;
}

}  // namespace uvi
