// uvi: unsupervised volumetric frame interpolation.
// One subcommand per stage: phantom data, preprocessing, cycle training,
// inference, per-pair fine-tuning, metric reports, label augmentation, and a
// gradient self-check. Exit codes: 0 success, 1 contract violation, 2 I/O.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uvi/augment.hpp"
#include "uvi/checkpoint.hpp"
#include "uvi/evalkit.hpp"
#include "uvi/interp.hpp"
#include "uvi/preprocess.hpp"
#include "uvi/train.hpp"

namespace fs = std::filesystem;
using F = float;

namespace {

// ---------------------------------------------------------------------------
// Small parsing helpers (strict: trailing junk is an error, not a warning)
// ---------------------------------------------------------------------------

double parse_strict_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  uvi::require(end == s.c_str() + s.size() && !s.empty(),
               uvi::cat("not a number: '", s, "'"));
  return v;
}

long parse_strict_int(const std::string& s) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  uvi::require(end == s.c_str() + s.size() && !s.empty(),
               uvi::cat("not an integer: '", s, "'"));
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) out.push_back(tok);
  return out;
}

std::vector<double> parse_ts(const std::string& s) {
  std::vector<double> out;
  for (const std::string& tok : split(s, ','))
    out.push_back(parse_strict_double(tok));
  uvi::require(!out.empty(), "expected at least one time value");
  return out;
}

std::string fmt_t(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", t);
  return buf;
}

bool deterministic_mode() {
  const char* v = std::getenv("UVI_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

// ---------------------------------------------------------------------------
// Run manifest: resolved settings + hashed inputs, written beside outputs
// ---------------------------------------------------------------------------

std::string hash_file_hex(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw uvi::IoError(uvi::cat("cannot open: ", p.string()));
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(uvi::fnv1a64(bytes)));
  return buf;
}

struct ManifestInfo {
  std::string command;
  std::vector<fs::path> inputs;
  fs::path out_dir;
  std::string config_file;      // empty when the command takes none
  std::string config_snapshot;  // resolved canonical text
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool has_seed = false;
};

void write_run_manifest(const ManifestInfo& info) {
  nlohmann::json j;
  j["command"] = info.command;
  j["version"] = uvi::kVersion;
  j["deterministic"] = deterministic_mode();
  j["out_dir"] = info.out_dir.string();
  nlohmann::json ins = nlohmann::json::array();
  for (const fs::path& p : info.inputs)
    ins.push_back({{"path", p.string()}, {"fnv1a64", hash_file_hex(p)}});
  j["inputs"] = std::move(ins);
  if (!info.config_file.empty()) j["config_file"] = info.config_file;
  if (!info.config_snapshot.empty()) {
    j["config"] = info.config_snapshot;
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(
                      uvi::fnv1a64(info.config_snapshot)));
    j["config_hash"] = buf;
  }
  if (!info.checkpoint.empty()) j["checkpoint"] = info.checkpoint;
  if (info.has_seed) j["seed"] = info.seed;

  const fs::path path = info.out_dir / "run_manifest.json";
  std::ofstream f(path);
  if (!f) throw uvi::IoError(uvi::cat("cannot write: ", path.string()));
  f << j.dump(2) << "\n";
  if (!f.good()) throw uvi::IoError(uvi::cat("write failed: ", path.string()));
}

void ensure_out_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw uvi::IoError(uvi::cat("cannot create ", out.string(), ": ",
                                      ec.message()));
}

// ---------------------------------------------------------------------------
// Manifest files: one whitespace-separated record per line, '#' comments,
// paths resolved relative to the manifest's own directory
// ---------------------------------------------------------------------------

std::vector<std::vector<fs::path>> read_path_manifest(const fs::path& file,
                                                      std::size_t columns) {
  std::ifstream f(file);
  if (!f) throw uvi::IoError(uvi::cat("cannot open manifest: ", file.string()));
  const fs::path base = file.parent_path();
  std::vector<std::vector<fs::path>> rows;
  std::string line;
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::stringstream ss(line);
    std::vector<fs::path> row;
    std::string tok;
    while (ss >> tok) {
      fs::path p(tok);
      row.push_back(p.is_absolute() ? p : base / p);
    }
    if (row.empty()) continue;
    uvi::require(row.size() == columns,
                 uvi::cat("manifest line needs ", columns, " paths, got ",
                          row.size(), ": ", line));
    rows.push_back(std::move(row));
  }
  uvi::require(!rows.empty(), uvi::cat("manifest is empty: ", file.string()));
  return rows;
}

// ---------------------------------------------------------------------------
// Config loading with --set key=value overrides (flags beat the file)
// ---------------------------------------------------------------------------

uvi::TrainConfig load_config(const fs::path& file,
                             const std::vector<std::string>& overrides) {
  uvi::TrainConfig cfg = uvi::TrainConfig::from_file(file);
  if (overrides.empty()) return cfg;
  std::string text = cfg.canonical_text();
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    uvi::require(eq != std::string::npos && eq > 0,
                 uvi::cat("--set wants key=value, got '", kv, "'"));
    const std::string key = kv.substr(0, eq) + "=";
    std::size_t start;
    if (text.rfind(key, 0) == 0) {
      start = 0;
    } else {
      const auto pos = text.find("\n" + key);
      uvi::require(pos != std::string::npos,
                   uvi::cat("unknown config key in --set: '",
                            kv.substr(0, eq), "'"));
      start = pos + 1;
    }
    const std::size_t end = text.find('\n', start);
    text.replace(start, end - start, kv);
  }
  return uvi::TrainConfig::parse(text);
}

// Labels on disk: multichannel UVIV = soft simplex; single channel = hard map.
uvi::LabelVolume<F> read_labels(const fs::path& p) {
  uvi::Volume<F> v = uvi::read_uviv<F>(p);
  if (v.channels() > 1) return uvi::LabelVolume<F>::from_soft(std::move(v));
  const std::size_t n = v.data.numel();
  std::vector<std::int32_t> hard(n);
  std::int32_t k = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::round(static_cast<double>(v.data[i]));
    uvi::require(std::abs(v.data[i] - r) < 1e-3 && r >= 0,
                 uvi::cat("hard label map has non-integer voxel: ",
                          p.string()));
    hard[i] = static_cast<std::int32_t>(r);
    k = std::max(k, hard[i] + 1);
  }
  return uvi::LabelVolume<F>::from_hard(hard, k, v.depth(), v.height(),
                                        v.width());
}

void write_hard_labels(const fs::path& p, const uvi::LabelVolume<F>& lv) {
  uvi::Volume<F> hard(1, lv.soft.depth(), lv.soft.height(), lv.soft.width());
  for (std::size_t i = 0; i < lv.hard.size(); ++i)
    hard.data[i] = static_cast<F>(lv.hard[i]);
  uvi::write_uviv(p, hard);
}

// ---------------------------------------------------------------------------
// Subcommand payloads
// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string kind = "translating_sphere";
  std::string shape = "32";
  double amplitude = 3.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
  std::string ts = "0.5";  // ground-truth frames beyond the endpoints
  bool labels = false;
  std::string out;
};

int run_phantom(const PhantomArgs& a) {
  uvi::PhantomSpec spec;
  spec.kind = uvi::phantom_kind_from_string(a.kind);
  const auto dims = split(a.shape, ',');
  uvi::require(dims.size() == 1 || dims.size() == 3,
               "--shape wants D or D,H,W");
  spec.d = static_cast<int>(parse_strict_int(dims[0]));
  spec.h = dims.size() == 3 ? static_cast<int>(parse_strict_int(dims[1])) : spec.d;
  spec.w = dims.size() == 3 ? static_cast<int>(parse_strict_int(dims[2])) : spec.d;
  spec.amplitude = a.amplitude;
  spec.noise_sigma = a.noise_sigma;
  spec.seed = a.seed;
  spec.validate();

  const fs::path out(a.out);
  ensure_out_dir(out);
  auto pp = uvi::phantom_pair<F>(spec);
  uvi::write_uviv(out / "i0.uviv", pp.i0);
  uvi::write_uviv(out / "i1.uviv", pp.i1);
  if (!a.ts.empty())
    for (const double t : parse_ts(a.ts))
      uvi::write_uviv(out / uvi::cat("gt_t", fmt_t(t), ".uviv"),
                      uvi::phantom_frame<F>(spec, t));
  if (a.labels) {
    uvi::write_uviv(out / "s0.uviv", uvi::phantom_labels<F>(spec, 0.0));
    uvi::write_uviv(out / "s1.uviv", uvi::phantom_labels<F>(spec, 1.0));
  }

  ManifestInfo m;
  m.command = "phantom";
  m.out_dir = out;
  m.seed = spec.seed;
  m.has_seed = true;
  write_run_manifest(m);
  return 0;
}

struct PreprocessArgs {
  std::string spec_file;
  std::string in;
  std::string out;
};

uvi::PreprocessSpec parse_preprocess_spec(const fs::path& file) {
  std::ifstream f(file);
  if (!f) throw uvi::IoError(uvi::cat("cannot open spec: ", file.string()));
  uvi::PreprocessSpec spec;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string trimmed;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c))) trimmed += c;
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    uvi::require(eq != std::string::npos,
                 uvi::cat("spec line ", lineno, " is not key=value"));
    const std::string key = trimmed.substr(0, eq);
    const std::string val = trimmed.substr(eq + 1);
    if (key == "modality") spec.modality = uvi::modality_from_string(val);
    else if (key == "window_low") spec.window_low = parse_strict_double(val);
    else if (key == "window_high") spec.window_high = parse_strict_double(val);
    else if (key == "bed_threshold") spec.bed_threshold = parse_strict_double(val);
    else if (key == "target_d") spec.target_d = static_cast<int>(parse_strict_int(val));
    else if (key == "target_h") spec.target_h = static_cast<int>(parse_strict_int(val));
    else if (key == "target_w") spec.target_w = static_cast<int>(parse_strict_int(val));
    else if (key == "normalize") spec.normalize = val == "true" || val == "1";
    else throw uvi::ContractViolation(uvi::cat("unknown spec key '", key, "'"));
  }
  spec.validate();
  return spec;
}

int run_preprocess(const PreprocessArgs& a) {
  uvi::PreprocessSpec spec;
  if (!a.spec_file.empty()) spec = parse_preprocess_spec(a.spec_file);
  spec.validate();
  const fs::path out(a.out);
  ensure_out_dir(out);
  auto raw = uvi::read_uviv<F>(a.in);
  auto v = uvi::preprocess_volume(raw, spec);
  uvi::write_uviv(out / "preprocessed.uviv", v);

  ManifestInfo m;
  m.command = "preprocess";
  m.inputs = {fs::path(a.in)};
  if (!a.spec_file.empty()) {
    m.inputs.push_back(fs::path(a.spec_file));
    m.config_file = a.spec_file;
  }
  m.out_dir = out;
  write_run_manifest(m);
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string pairs;
  std::string out;
  std::string resume;
  std::vector<std::string> sets;
  bool force = false;
};

int run_train(const TrainArgs& a) {
  const uvi::TrainConfig cfg = load_config(a.config, a.sets);
  const auto rows = read_path_manifest(a.pairs, 2);
  std::vector<std::pair<uvi::Volume<F>, uvi::Volume<F>>> pairs;
  pairs.reserve(rows.size());
  for (const auto& row : rows)
    pairs.emplace_back(uvi::read_uviv<F>(row[0]), uvi::read_uviv<F>(row[1]));

  const fs::path out(a.out);
  ensure_out_dir(out);

  if (a.resume.empty()) {
    uvi::TrainRun<F> run(cfg);
    uvi::train_epochs(run, pairs, out);
  } else {
    auto loaded = uvi::load_checkpoint<F>(a.resume, &cfg, a.force);
    uvi::TrainRun<F> run(cfg, std::move(loaded));
    uvi::train_epochs(run, pairs, out);
  }
  cfg.save(out / "config.resolved.cfg");

  ManifestInfo m;
  m.command = "train";
  m.inputs = {fs::path(a.config), fs::path(a.pairs)};
  for (const auto& row : rows) m.inputs.insert(m.inputs.end(), row.begin(), row.end());
  m.out_dir = out;
  m.config_file = a.config;
  m.config_snapshot = cfg.canonical_text();
  m.checkpoint = a.resume;
  m.seed = cfg.rng_seed;
  m.has_seed = true;
  write_run_manifest(m);
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string i0, i1;
  std::string ts = "0.5";
  std::string mode = "cycle";
  bool allow_extrapolation = false;
  int instance_opt = 0;
  std::string out;
};

int run_infer(const InferArgs& a) {
  auto loaded = uvi::load_checkpoint<F>(a.checkpoint);
  auto i0 = uvi::read_uviv<F>(a.i0);
  auto i1 = uvi::read_uviv<F>(a.i1);
  const std::vector<double> ts = parse_ts(a.ts);

  uvi::InterpMode mode;
  if (a.mode == "cycle") mode = uvi::InterpMode::cycle;
  else if (a.mode == "linear") mode = uvi::InterpMode::linear_baseline;
  else throw uvi::ContractViolation(uvi::cat("unknown --mode '", a.mode,
                                             "' (cycle|linear)"));

  uvi::ModelBundle<F> bundle = std::move(loaded.bundle);
  if (a.instance_opt > 0)
    bundle = uvi::instance_optimize(bundle, i0, i1, a.instance_opt,
                                    loaded.config);

  const fs::path out(a.out);
  ensure_out_dir(out);
  for (const double t : ts) {
    uvi::InterpolationRequest req;
    req.t = uvi::TimeStamp{t};
    req.mode = mode;
    req.extrapolation_allowed = a.allow_extrapolation;
    auto v = uvi::run_interpolation(bundle, i0, i1, req);
    uvi::write_uviv(out / uvi::cat("frame_t", fmt_t(t), ".uviv"), v);
  }

  ManifestInfo m;
  m.command = "infer";
  m.inputs = {fs::path(a.checkpoint), fs::path(a.i0), fs::path(a.i1)};
  m.out_dir = out;
  m.checkpoint = a.checkpoint;
  m.config_snapshot = loaded.config.canonical_text();
  write_run_manifest(m);
  return 0;
}

struct OptimizeArgs {
  std::string checkpoint;
  std::string i0, i1;
  int steps = 100;
  std::string out;
};

int run_optimize(const OptimizeArgs& a) {
  auto loaded = uvi::load_checkpoint<F>(a.checkpoint);
  auto i0 = uvi::read_uviv<F>(a.i0);
  auto i1 = uvi::read_uviv<F>(a.i1);
  uvi::Adam<F> opt_out(uvi::AdamConfig{loaded.config.learning_rate, 0.9, 0.999,
                                       1e-8, loaded.config.clip_norm});
  auto tuned = uvi::instance_optimize(loaded.bundle, i0, i1, a.steps,
                                      loaded.config,
                                      static_cast<const uvi::Adam<F>*>(nullptr),
                                      &opt_out);
  const fs::path out(a.out);
  ensure_out_dir(out);
  uvi::save_checkpoint(out / "optimized.ckpt", tuned, loaded.config, &opt_out);

  ManifestInfo m;
  m.command = "optimize";
  m.inputs = {fs::path(a.checkpoint), fs::path(a.i0), fs::path(a.i1)};
  m.out_dir = out;
  m.checkpoint = a.checkpoint;
  m.config_snapshot = loaded.config.canonical_text();
  write_run_manifest(m);
  return 0;
}

struct EvalArgs {
  std::string gt_dir;
  std::string pred_dir;
  std::string out;
  std::string checkpoint_hash;
  std::string dataset_id;
  std::string mode;
};

// "..._t{t}.uviv" -> t; nan when the name has no parsable time
double t_from_name(const fs::path& p) {
  const std::string stem = p.stem().string();
  const auto pos = stem.rfind("_t");
  if (pos == std::string::npos) return std::nan("");
  char* end = nullptr;
  const std::string tail = stem.substr(pos + 2);
  const double v = std::strtod(tail.c_str(), &end);
  if (end != tail.c_str() + tail.size() || tail.empty()) return std::nan("");
  return v;
}

std::vector<fs::path> list_uviv(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw uvi::IoError(uvi::cat("not a directory: ", dir.string()));
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".uviv")
      out.push_back(e.path());
  uvi::require(!out.empty(), uvi::cat("no .uviv files in ", dir.string()));
  bool all_t = true;
  for (const fs::path& p : out)
    all_t = all_t && !std::isnan(t_from_name(p));
  if (all_t)
    std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
      return t_from_name(a) < t_from_name(b);
    });
  else
    std::sort(out.begin(), out.end());
  return out;
}

// Pair each prediction with its ground truth. When every prediction carries a
// "_t{t}" name token and at least one gt file does too, match by time and
// ignore gt files without one (endpoint/label volumes living in the same dir).
// Otherwise pair positionally over the sorted listings.
std::vector<std::pair<fs::path, fs::path>> pair_eval_files(
    const std::vector<fs::path>& gts, const std::vector<fs::path>& preds) {
  bool preds_have_t = true;
  for (const fs::path& p : preds)
    preds_have_t = preds_have_t && !std::isnan(t_from_name(p));
  std::vector<fs::path> gt_t;
  for (const fs::path& g : gts)
    if (!std::isnan(t_from_name(g))) gt_t.push_back(g);
  std::vector<std::pair<fs::path, fs::path>> out;
  if (preds_have_t && !gt_t.empty()) {
    for (const fs::path& p : preds) {
      const double t = t_from_name(p);
      const fs::path* hit = nullptr;
      for (const fs::path& g : gt_t)
        if (t_from_name(g) == t) hit = &g;
      uvi::require(hit != nullptr,
                   uvi::cat("no ground truth for t=", t, " (", p.string(), ")"));
      out.emplace_back(*hit, p);
    }
    return out;
  }
  uvi::require(gts.size() == preds.size(),
               uvi::cat("gt dir has ", gts.size(), " volumes, pred dir has ",
                        preds.size()));
  for (std::size_t i = 0; i < gts.size(); ++i) out.emplace_back(gts[i], preds[i]);
  return out;
}

int run_eval(const EvalArgs& a) {
  const auto gts = list_uviv(a.gt_dir);
  const auto preds = list_uviv(a.pred_dir);
  const auto pairs = pair_eval_files(gts, preds);
  std::vector<uvi::Volume<F>> gv, pv;
  std::vector<double> ts;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    gv.push_back(uvi::read_uviv<F>(pairs[i].first));
    pv.push_back(uvi::read_uviv<F>(pairs[i].second));
    double t = t_from_name(pairs[i].second);
    if (std::isnan(t)) t = t_from_name(pairs[i].first);
    ts.push_back(std::isnan(t) ? static_cast<double>(i) : t);
  }
  auto rep = uvi::evaluate_sequence(gv, pv, ts);
  rep.checkpoint_hash = a.checkpoint_hash;
  rep.dataset_id = a.dataset_id;
  rep.mode = a.mode;

  const fs::path out(a.out);
  ManifestInfo m;
  m.command = "eval";
  for (const auto& [g, p] : pairs) {
    m.inputs.push_back(g);
    m.inputs.push_back(p);
  }
  if (out.extension() == ".csv") {
    ensure_out_dir(out.parent_path().empty() ? fs::path(".") : out.parent_path());
    uvi::write_csv(rep, out);
    m.out_dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
  } else if (out.extension() == ".json") {
    ensure_out_dir(out.parent_path().empty() ? fs::path(".") : out.parent_path());
    uvi::write_json(rep, out);
    m.out_dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
  } else {
    ensure_out_dir(out);
    uvi::write_csv(rep, out / "report.csv");
    uvi::write_json(rep, out / "report.json");
    m.out_dir = out;
  }
  write_run_manifest(m);
  return 0;
}

struct AugmentArgs {
  std::string checkpoint;
  std::string pairs;
  std::string ts = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
  std::string out;
};

int run_augment(const AugmentArgs& a) {
  auto loaded = uvi::load_checkpoint<F>(a.checkpoint);
  const auto rows = read_path_manifest(a.pairs, 4);  // i0 i1 s0 s1
  const std::vector<double> ts = parse_ts(a.ts);
  const fs::path out(a.out);
  ensure_out_dir(out);

  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto i0 = uvi::read_uviv<F>(rows[k][0]);
    auto i1 = uvi::read_uviv<F>(rows[k][1]);
    auto s0 = read_labels(rows[k][2]);
    auto s1 = read_labels(rows[k][3]);
    for (const double t : ts) {
      auto res = uvi::augment_pair(loaded.bundle, i0, i1, s0, s1, t);
      const std::string base = uvi::cat("pair", k, "_t", fmt_t(t));
      uvi::write_uviv(out / (base + ".uviv"), res.image);
      write_hard_labels(out / (base + "_labels.uviv"), res.labels);
    }
  }

  ManifestInfo m;
  m.command = "augment";
  m.inputs = {fs::path(a.checkpoint), fs::path(a.pairs)};
  for (const auto& row : rows) m.inputs.insert(m.inputs.end(), row.begin(), row.end());
  m.out_dir = out;
  m.checkpoint = a.checkpoint;
  m.config_snapshot = loaded.config.canonical_text();
  write_run_manifest(m);
  return 0;
}

struct GradcheckArgs {
  long samples = 40;
  std::uint64_t seed = 7;
  double h = 1e-4;
  double tolerance = 1e-4;
};

int run_gradcheck(const GradcheckArgs& a) {
  using D = double;
  uvi::Rng rng(a.seed);
  const int d = 5, h = 6, w = 7;
  auto fill = [&](uvi::Tensor<D>& t, double lo, double hi) {
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = lo + (hi - lo) * rng.uniform();
  };

  double worst = 0.0;
  auto report = [&](const char* name, const uvi::GradCheckReport& r) {
    std::printf("%-28s max_rel %.3e  max_abs %.3e  max_joint %.3e  (%ld entries)\n",
                name, r.max_rel_err, r.max_abs_err, r.max_joint_err, r.checked);
    worst = std::max(worst, r.max_joint_err);
  };

  {
    std::vector<uvi::Tensor<D>> in;
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    in.emplace_back(uvi::Tensor<D>({3, d, h, w}));
    fill(in[0], 0.1, 0.9);
    fill(in[1], 0.1, 0.9);
    fill(in[2], -0.8, 0.8);
    auto build = [&](uvi::Tape<D>& t, std::vector<uvi::Node<D>*>& ls) {
      return uvi::image_loss_node(t, t.warp(ls[0], ls[2]), ls[1], 3, D(1e-3));
    };
    report("warp+image_loss", uvi::grad_check(in, build, a.h, a.samples, rng));
  }
  {
    std::vector<uvi::Tensor<D>> in;
    in.emplace_back(uvi::Tensor<D>({3, d, h, w}));
    fill(in[0], -0.8, 0.8);
    auto build = [&](uvi::Tape<D>& t, std::vector<uvi::Node<D>*>& ls) {
      return uvi::smoothness_node(t, ls[0]);
    };
    report("smoothness", uvi::grad_check(in, build, a.h, a.samples, rng));
  }
  {
    std::vector<uvi::Tensor<D>> in;
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    fill(in[0], 0.2, 0.8);
    fill(in[1], 0.2, 0.8);
    auto build = [&](uvi::Tape<D>& t, std::vector<uvi::Node<D>*>& ls) {
      return uvi::charbonnier_node(t, ls[0], ls[1], D(1e-3));
    };
    report("charbonnier", uvi::grad_check(in, build, a.h, a.samples, rng));
  }
  {
    std::vector<uvi::Tensor<D>> in;
    in.emplace_back(uvi::Tensor<D>({2, d, h, w}));
    in.emplace_back(uvi::Tensor<D>({2, d, h, w}));
    fill(in[0], 0.05, 0.95);
    fill(in[1], 0.05, 0.95);
    auto build = [&](uvi::Tape<D>& t, std::vector<uvi::Node<D>*>& ls) {
      return uvi::dice_loss_node(t, ls[0], ls[1]);
    };
    report("dice", uvi::grad_check(in, build, a.h, a.samples, rng));
  }
  {
    std::vector<uvi::Tensor<D>> in;
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    in.emplace_back(uvi::Tensor<D>({1, d, h, w}));
    fill(in[0], 0.1, 0.9);
    fill(in[1], 0.1, 0.9);
    auto build = [&](uvi::Tape<D>& t, std::vector<uvi::Node<D>*>& ls) {
      return uvi::charbonnier_node(
          t, t.fuse(ls[0], ls[1], D(0.3), D(0.7)), ls[0], D(1e-3));
    };
    report("fuse+charbonnier", uvi::grad_check(in, build, a.h, a.samples, rng));
  }

  std::printf("worst max_joint %.3e (tolerance %.1e)\n", worst, a.tolerance);
  uvi::require(worst <= a.tolerance, "gradient check failed tolerance");
  std::printf("gradcheck: OK\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uvi: unsupervised volumetric frame interpolation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "print help for every subcommand");

  PhantomArgs pa;
  auto* phantom = app.add_subcommand(
      "phantom", "generate an analytic moving phantom pair");
  phantom->add_option("--kind", pa.kind,
                      "translating_sphere|expanding_sphere|sinusoidal_deformation")
      ->capture_default_str();
  phantom->add_option("--shape", pa.shape, "D or D,H,W voxels")
      ->capture_default_str();
  phantom->add_option("--amplitude", pa.amplitude, "motion amplitude in voxels")
      ->capture_default_str();
  phantom->add_option("--noise-sigma", pa.noise_sigma,
                      "Gaussian noise sigma on the endpoint frames")
      ->capture_default_str();
  phantom->add_option("--seed", pa.seed, "noise RNG seed")->capture_default_str();
  phantom->add_option("--ts", pa.ts,
                      "comma list of extra ground-truth frame times")
      ->capture_default_str();
  phantom->add_flag("--labels", pa.labels,
                    "also write soft segmentation labels s0/s1");
  phantom->add_option("--out", pa.out, "output directory")->required();

  PreprocessArgs ra;
  auto* prep = app.add_subcommand("preprocess",
                                  "window/clean/resize/normalize one volume");
  prep->add_option("--spec", ra.spec_file,
                   "key=value spec file (modality, window, target shape)");
  prep->add_option("--in", ra.in, "input UVIV volume")->required();
  prep->add_option("--out", ra.out, "output directory")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train",
                                   "cycle-consistent training over a pair list");
  train->add_option("--config", ta.config, "key=value training config file")
      ->required();
  train->add_option("--pairs", ta.pairs,
                    "manifest: one 'i0.uviv i1.uviv' line per pair")
      ->required();
  train->add_option("--resume", ta.resume,
                    "checkpoint to continue from (epoch boundary)");
  train->add_option("--set", ta.sets,
                    "override a config key, e.g. --set epochs=5 (repeatable)");
  train->add_flag("--force", ta.force,
                  "accept a resume checkpoint whose config hash differs");
  train->add_option("--out", ta.out, "output directory")->required();

  InferArgs ia;
  auto* infer = app.add_subcommand("infer",
                                   "synthesize frames at chosen times");
  infer->add_option("--checkpoint", ia.checkpoint, "trained model checkpoint")
      ->required();
  infer->add_option("--i0", ia.i0, "endpoint frame at t=0")->required();
  infer->add_option("--i1", ia.i1, "endpoint frame at t=1")->required();
  infer->add_option("--ts,--t", ia.ts, "comma list of times")
      ->capture_default_str();
  infer->add_option("--mode", ia.mode, "cycle|linear")->capture_default_str();
  infer->add_flag("--allow-extrapolation", ia.allow_extrapolation,
                  "permit times in [-0.5,0) and (1,1.5]");
  infer->add_option("--instance-opt", ia.instance_opt,
                    "fine-tuning steps on this pair before inference")
      ->capture_default_str();
  infer->add_option("--out", ia.out, "output directory")->required();

  OptimizeArgs oa;
  auto* opt = app.add_subcommand(
      "optimize", "fine-tune a checkpoint on one pair and save it");
  opt->add_option("--checkpoint", oa.checkpoint, "trained model checkpoint")
      ->required();
  opt->add_option("--i0", oa.i0, "endpoint frame at t=0")->required();
  opt->add_option("--i1", oa.i1, "endpoint frame at t=1")->required();
  opt->add_option("--steps", oa.steps, "optimization steps")
      ->capture_default_str();
  opt->add_option("--out", oa.out, "output directory")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval",
                                  "score predictions against ground truth");
  eval->add_option("--gt-dir", ea.gt_dir, "directory of ground-truth .uviv")
      ->required();
  eval->add_option("--pred-dir", ea.pred_dir, "directory of predicted .uviv")
      ->required();
  eval->add_option("--out", ea.out,
                   "report path (.csv, .json, or a directory for both)")
      ->required();
  eval->add_option("--checkpoint-hash", ea.checkpoint_hash,
                   "provenance: checkpoint hash for the report");
  eval->add_option("--dataset-id", ea.dataset_id,
                   "provenance: dataset identifier for the report");
  eval->add_option("--mode", ea.mode, "provenance: inference mode label");

  AugmentArgs aa;
  auto* aug = app.add_subcommand(
      "augment", "emit interpolated image+label training pairs");
  aug->add_option("--checkpoint", aa.checkpoint, "trained model checkpoint")
      ->required();
  aug->add_option("--pairs", aa.pairs,
                  "manifest: one 'i0 i1 s0 s1' line per labeled pair")
      ->required();
  aug->add_option("--ts", aa.ts, "comma list of augmentation times")
      ->capture_default_str();
  aug->add_option("--out", aa.out, "output directory")->required();

  GradcheckArgs ga;
  auto* grad = app.add_subcommand(
      "gradcheck", "finite-difference check of the loss gradients");
  grad->add_option("--samples", ga.samples, "entries probed per input tensor")
      ->capture_default_str();
  grad->add_option("--seed", ga.seed, "probe RNG seed")->capture_default_str();
  grad->add_option("--step", ga.h, "finite-difference step")
      ->capture_default_str();
  grad->add_option("--tolerance", ga.tolerance, "max allowed joint error")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*phantom) return run_phantom(pa);
    if (*prep) return run_preprocess(ra);
    if (*train) return run_train(ta);
    if (*infer) return run_infer(ia);
    if (*opt) return run_optimize(oa);
    if (*eval) return run_eval(ea);
    if (*aug) return run_augment(aa);
    if (*grad) return run_gradcheck(ga);
  } catch (const uvi::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const uvi::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 1;
  } catch (const uvi::ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
