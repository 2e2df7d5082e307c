#pragma once
// Flat key=value training configuration with a canonical serialization. The
// canonical text (sorted keys, fixed number formatting) is what gets hashed
// and embedded in checkpoints, so two configs agree iff their hashes do.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/nets.hpp"

namespace uvi {

struct TrainConfig {
  // optimization
  int epochs = 200;
  double learning_rate = 2e-4;
  int batch_size = 1;  // the only supported value
  double clip_norm = 1.0;
  std::uint64_t rng_seed = 0;

  // loss assembly
  double w_smooth = 1.0;
  double w_image = 1.0;
  double w_cyc = 1.0;
  double w_reg = 1.0;
  double w_dice = 1.0;
  bool use_image_cyc = true;  // ablation: drop the image term inside the cycle
  bool use_reg = true;        // ablation: drop the residual-magnitude term
  int ncc_window = 9;
  double charbonnier_eps = 1e-3;
  double min_time_gap = 1e-3;

  // model
  NetShape shape;

  // bookkeeping
  int log_every = 1;        // steps between JSONL log lines
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = only final

  void validate() const {
    require(epochs >= 1, "config: epochs must be >= 1");
    require(learning_rate > 0.0, "config: learning_rate must be > 0");
    require(batch_size == 1, "config: batch_size must be 1");
    require(ncc_window >= 3 && ncc_window % 2 == 1,
            "config: ncc_window must be odd and >= 3");
    require(charbonnier_eps > 0.0, "config: charbonnier_eps must be > 0");
    require(min_time_gap > 0.0, "config: min_time_gap must be > 0");
    require(w_smooth >= 0.0 && w_image >= 0.0 && w_cyc >= 0.0 &&
                w_reg >= 0.0 && w_dice >= 0.0,
            "config: loss weights must be >= 0");
    require(log_every >= 1, "config: log_every must be >= 1");
    require(checkpoint_every >= 0, "config: checkpoint_every must be >= 0");
    require(shape.recon_base >= 1, "config: recon_base must be >= 1");
    for (int c : shape.flow_enc)
      require(c >= 1, "config: flow_enc widths must be >= 1");
    for (int c : shape.flow_dec)
      require(c >= 1, "config: flow_dec widths must be >= 1");
  }

  std::string canonical_text() const;
  std::uint64_t hash() const { return fnv1a64(canonical_text()); }

  static TrainConfig parse(std::string_view text);
  static TrainConfig from_file(const std::filesystem::path& p);
  void save(const std::filesystem::path& p) const;
};

namespace cfg_detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <std::size_t N>
std::string fmt_ints(const std::array<int, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) s += ',';
    s += std::to_string(a[i]);
  }
  return s;
}

template <std::size_t N>
std::array<int, N> parse_ints(std::string_view key, std::string_view v) {
  std::array<int, N> out{};
  std::size_t idx = 0, pos = 0;
  while (idx < N) {
    const std::size_t comma = v.find(',', pos);
    const std::string_view tok =
        comma == std::string_view::npos ? v.substr(pos) : v.substr(pos, comma - pos);
    try {
      out[idx] = std::stoi(std::string(tok));
    } catch (const std::exception&) {
      throw ContractViolation(cat("config: bad integer in ", key, ": ", tok));
    }
    ++idx;
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  require(idx == N, cat("config: ", key, " wants ", N, " comma-separated ints"));
  return out;
}

inline double parse_double(std::string_view key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    require(used == v.size(), cat("config: trailing junk in ", key, ": ", v));
    return d;
  } catch (const ContractViolation&) {
    throw;
  } catch (const std::exception&) {
    throw ContractViolation(cat("config: bad number for ", key, ": ", v));
  }
}

inline long long parse_int(std::string_view key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    require(used == v.size(), cat("config: trailing junk in ", key, ": ", v));
    return i;
  } catch (const ContractViolation&) {
    throw;
  } catch (const std::exception&) {
    throw ContractViolation(cat("config: bad integer for ", key, ": ", v));
  }
}

inline bool parse_bool(std::string_view key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractViolation(cat("config: bad bool for ", key, ": ", v));
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace cfg_detail

inline std::string TrainConfig::canonical_text() const {
  using cfg_detail::fmt_double;
  using cfg_detail::fmt_ints;
  // std::map keeps the keys sorted
  std::map<std::string, std::string> kv;
  kv["batch_size"] = std::to_string(batch_size);
  kv["charbonnier_eps"] = fmt_double(charbonnier_eps);
  kv["checkpoint_every"] = std::to_string(checkpoint_every);
  kv["clip_norm"] = fmt_double(clip_norm);
  kv["epochs"] = std::to_string(epochs);
  kv["feature_mode"] = to_string(shape.feature_mode);
  kv["flow_dec"] = fmt_ints(shape.flow_dec);
  kv["flow_enc"] = fmt_ints(shape.flow_enc);
  kv["learning_rate"] = fmt_double(learning_rate);
  kv["log_every"] = std::to_string(log_every);
  kv["min_time_gap"] = fmt_double(min_time_gap);
  kv["ncc_window"] = std::to_string(ncc_window);
  kv["recon_base"] = std::to_string(shape.recon_base);
  kv["rng_seed"] = std::to_string(rng_seed);
  kv["use_image_cyc"] = use_image_cyc ? "true" : "false";
  kv["use_reg"] = use_reg ? "true" : "false";
  kv["w_cyc"] = fmt_double(w_cyc);
  kv["w_dice"] = fmt_double(w_dice);
  kv["w_image"] = fmt_double(w_image);
  kv["w_reg"] = fmt_double(w_reg);
  kv["w_smooth"] = fmt_double(w_smooth);
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

inline TrainConfig TrainConfig::parse(std::string_view text) {
  using namespace cfg_detail;
  TrainConfig c;
  std::map<std::string, bool> seen;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line =
        nl == std::string_view::npos ? text.substr(pos) : text.substr(pos, nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string_view::npos, cat("config: expected key=value: ", line));
    const std::string key{trim(line.substr(0, eq))};
    const std::string val{trim(line.substr(eq + 1))};
    require(!seen[key], cat("config: duplicate key: ", key));
    seen[key] = true;

    if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, val));
    else if (key == "charbonnier_eps") c.charbonnier_eps = parse_double(key, val);
    else if (key == "checkpoint_every") c.checkpoint_every = static_cast<int>(parse_int(key, val));
    else if (key == "clip_norm") c.clip_norm = parse_double(key, val);
    else if (key == "epochs") c.epochs = static_cast<int>(parse_int(key, val));
    else if (key == "feature_mode") c.shape.feature_mode = feature_mode_from_string(val);
    else if (key == "flow_dec") c.shape.flow_dec = parse_ints<7>(key, val);
    else if (key == "flow_enc") c.shape.flow_enc = parse_ints<4>(key, val);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, val);
    else if (key == "log_every") c.log_every = static_cast<int>(parse_int(key, val));
    else if (key == "min_time_gap") c.min_time_gap = parse_double(key, val);
    else if (key == "ncc_window") c.ncc_window = static_cast<int>(parse_int(key, val));
    else if (key == "recon_base") c.shape.recon_base = static_cast<int>(parse_int(key, val));
    else if (key == "rng_seed") c.rng_seed = static_cast<std::uint64_t>(parse_int(key, val));
    else if (key == "use_image_cyc") c.use_image_cyc = parse_bool(key, val);
    else if (key == "use_reg") c.use_reg = parse_bool(key, val);
    else if (key == "w_cyc") c.w_cyc = parse_double(key, val);
    else if (key == "w_dice") c.w_dice = parse_double(key, val);
    else if (key == "w_image") c.w_image = parse_double(key, val);
    else if (key == "w_reg") c.w_reg = parse_double(key, val);
    else if (key == "w_smooth") c.w_smooth = parse_double(key, val);
    else throw ContractViolation(cat("config: unknown key: ", key));
  }
  c.validate();
  return c;
}

inline TrainConfig TrainConfig::from_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError(cat("cannot open config: ", p.string()));
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

inline void TrainConfig::save(const std::filesystem::path& p) const {
  std::ofstream f(p);
  if (!f) throw IoError(cat("cannot write config: ", p.string()));
  f << canonical_text();
  if (!f) throw IoError(cat("write failed: ", p.string()));
}

}  // namespace uvi
