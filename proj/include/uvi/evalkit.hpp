#pragma once
// Whole-volume similarity metrics (PSNR / global NCC / SSIM / NMSE) and the
// per-sequence report with CSV/JSON serialization.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/volume.hpp"

namespace uvi {

struct PsnrResult {
  double db = 0.0;
  bool capped = false;  // true when MSE == 0 and db is the 100 dB sentinel
};

template <class S>
PsnrResult psnr(const Volume<S>& gt, const Volume<S>& pred) {
  require(gt.data.same_shape(pred.data), "psnr: shape mismatch");
  const std::size_t n = gt.data.numel();
  require(n > 0, "psnr: empty volume");
  double mse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(gt.data[i]) - static_cast<double>(pred.data[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse == 0.0) return {100.0, true};
  return {10.0 * std::log10(1.0 / mse), false};  // data range R = 1
}

// Pearson correlation over all voxels; distinct from the windowed loss-side
// correlation.
template <class S>
double ncc_global(const Volume<S>& a, const Volume<S>& b) {
  require(a.data.same_shape(b.data), "ncc_global: shape mismatch");
  const std::size_t n = a.data.numel();
  require(n > 1, "ncc_global: need at least two voxels");
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double va = a.data[i], vb = b.data[i];
    sa += va;
    sb += vb;
    saa += va * va;
    sbb += vb * vb;
    sab += va * vb;
  }
  const double nn = static_cast<double>(n);
  const double var_a = saa - sa * sa / nn;
  const double var_b = sbb - sb * sb / nn;
  require(var_a > 0.0 && var_b > 0.0, "ncc_global: constant volume has no correlation");
  return (sab - sa * sb / nn) / std::sqrt(var_a * var_b);
}

namespace eval_detail {

// Sliding box sum with border truncation, one axis at a time via prefix sums.
inline void box_axis(std::vector<double>& v, int outer, int len, int inner,
                     int r, std::vector<double>& pref) {
  pref.resize(static_cast<std::size_t>(len) + 1);
  std::vector<double> row(static_cast<std::size_t>(len));
  for (int o = 0; o < outer; ++o)
    for (int i = 0; i < inner; ++i) {
      const std::size_t base = (static_cast<std::size_t>(o) * len) * inner + i;
      pref[0] = 0.0;
      for (int k = 0; k < len; ++k)
        pref[k + 1] = pref[k] + v[base + static_cast<std::size_t>(k) * inner];
      for (int k = 0; k < len; ++k) {
        const int lo = std::max(0, k - r), hi = std::min(len - 1, k + r);
        row[k] = pref[hi + 1] - pref[lo];
      }
      for (int k = 0; k < len; ++k)
        v[base + static_cast<std::size_t>(k) * inner] = row[k];
    }
}

inline void box3(std::vector<double>& v, int d, int h, int w, int r) {
  std::vector<double> pref;
  box_axis(v, d * h, w, 1, r, pref);
  box_axis(v, d, h, w, r, pref);
  box_axis(v, 1, d, h * w, r, pref);
}

}  // namespace eval_detail

// Mean local SSIM, uniform cubic window (border-clipped), L = 1.
template <class S>
double ssim3d(const Volume<S>& gt, const Volume<S>& pred, int window = 7,
              double k1 = 0.01, double k2 = 0.03) {
  require(gt.data.same_shape(pred.data), "ssim3d: shape mismatch");
  require(window >= 1 && window % 2 == 1, "ssim3d: window must be odd and >= 1");
  const int c = gt.channels(), d = gt.depth(), h = gt.height(), w = gt.width();
  const int r = window / 2;
  const double c1 = k1 * k1, c2 = k2 * k2;
  const std::size_t plane = static_cast<std::size_t>(d) * h * w;

  double total = 0.0;
  std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t off = static_cast<std::size_t>(ch) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double va = gt.data[off + i], vb = pred.data[off + i];
      a[i] = va;
      b[i] = vb;
      aa[i] = va * va;
      bb[i] = vb * vb;
      ab[i] = va * vb;
    }
    eval_detail::box3(a, d, h, w, r);
    eval_detail::box3(b, d, h, w, r);
    eval_detail::box3(aa, d, h, w, r);
    eval_detail::box3(bb, d, h, w, r);
    eval_detail::box3(ab, d, h, w, r);
    std::size_t i = 0;
    for (int z = 0; z < d; ++z) {
      const int nz = std::min(d - 1, z + r) - std::max(0, z - r) + 1;
      for (int y = 0; y < h; ++y) {
        const int ny = std::min(h - 1, y + r) - std::max(0, y - r) + 1;
        for (int x = 0; x < w; ++x, ++i) {
          const int nx = std::min(w - 1, x + r) - std::max(0, x - r) + 1;
          const double n = static_cast<double>(nz) * ny * nx;
          const double mu_a = a[i] / n, mu_b = b[i] / n;
          const double var_a = aa[i] / n - mu_a * mu_a;
          const double var_b = bb[i] / n - mu_b * mu_b;
          const double cov = ab[i] / n - mu_a * mu_b;
          total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
      }
    }
  }
  return total / (static_cast<double>(c) * static_cast<double>(plane));
}

// ||gt - pred||^2 / ||gt||^2.
template <class S>
double nmse(const Volume<S>& gt, const Volume<S>& pred) {
  require(gt.data.same_shape(pred.data), "nmse: shape mismatch");
  double num = 0.0, den = 0.0;
  const std::size_t n = gt.data.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = gt.data[i];
    const double d = g - static_cast<double>(pred.data[i]);
    num += d * d;
    den += g * g;
  }
  require(den > 0.0, "nmse: reference volume has zero energy");
  return num / den;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalRow {
  double t = 0.0;
  double psnr_db = 0.0;
  bool psnr_capped = false;
  double ncc = 0.0;
  double ssim = 0.0;
  double nmse = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0, mean_ncc = 0.0, mean_ssim = 0.0, mean_nmse = 0.0;
  bool any_capped = false;
  // Provenance, filled by the caller.
  std::string checkpoint_hash;
  std::string dataset_id;
  std::string mode;

  void recompute_means() {
    require(!rows.empty(), "eval report: no rows");
    mean_psnr = mean_ncc = mean_ssim = mean_nmse = 0.0;
    any_capped = false;
    for (const EvalRow& r : rows) {
      mean_psnr += r.psnr_db;
      mean_ncc += r.ncc;
      mean_ssim += r.ssim;
      mean_nmse += r.nmse;
      any_capped = any_capped || r.psnr_capped;
    }
    const double n = static_cast<double>(rows.size());
    mean_psnr /= n;
    mean_ncc /= n;
    mean_ssim /= n;
    mean_nmse /= n;
  }
};

template <class S>
EvalReport evaluate_sequence(const std::vector<Volume<S>>& gts,
                             const std::vector<Volume<S>>& preds,
                             const std::vector<double>& ts) {
  require(gts.size() == preds.size() && gts.size() == ts.size(),
          "evaluate_sequence: gts, preds and ts must have equal length");
  require(!gts.empty(), "evaluate_sequence: empty sequence");
  EvalReport rep;
  rep.rows.reserve(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    EvalRow row;
    row.t = ts[i];
    const PsnrResult p = psnr(gts[i], preds[i]);
    row.psnr_db = p.db;
    row.psnr_capped = p.capped;
    row.ncc = ncc_global(gts[i], preds[i]);
    row.ssim = ssim3d(gts[i], preds[i]);
    row.nmse = nmse(gts[i], preds[i]);
    rep.rows.push_back(row);
  }
  rep.recompute_means();
  return rep;
}

namespace eval_detail {

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace eval_detail

inline void write_csv(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(cat("cannot open '", path.string(), "' for writing"));
  out << "t,psnr_db,ncc,ssim,nmse\n";
  for (const EvalRow& r : rep.rows)
    out << eval_detail::fmt_g(r.t) << ',' << eval_detail::fmt_g(r.psnr_db) << ','
        << eval_detail::fmt_g(r.ncc) << ',' << eval_detail::fmt_g(r.ssim) << ','
        << eval_detail::fmt_g(r.nmse) << '\n';
  if (!out.good()) throw IoError(cat("failed writing '", path.string(), "'"));
}

inline void write_json(const EvalReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(cat("cannot open '", path.string(), "' for writing"));
  auto esc = [](const std::string& s) {
    std::string r;
    for (char c : s) {
      if (c == '"' || c == '\\') r += '\\';
      r += c;
    }
    return r;
  };
  out << "{\n  \"checkpoint_hash\": \"" << esc(rep.checkpoint_hash) << "\",\n";
  out << "  \"dataset_id\": \"" << esc(rep.dataset_id) << "\",\n";
  out << "  \"mode\": \"" << esc(rep.mode) << "\",\n";
  out << "  \"mean_psnr_db\": " << eval_detail::fmt_g(rep.mean_psnr) << ",\n";
  out << "  \"mean_ncc\": " << eval_detail::fmt_g(rep.mean_ncc) << ",\n";
  out << "  \"mean_ssim\": " << eval_detail::fmt_g(rep.mean_ssim) << ",\n";
  out << "  \"mean_nmse\": " << eval_detail::fmt_g(rep.mean_nmse) << ",\n";
  out << "  \"any_psnr_capped\": " << (rep.any_capped ? "true" : "false") << ",\n";
  out << "  \"rows\": [\n";
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    const EvalRow& r = rep.rows[i];
    out << "    {\"t\": " << eval_detail::fmt_g(r.t)
        << ", \"psnr_db\": " << eval_detail::fmt_g(r.psnr_db)
        << ", \"psnr_capped\": " << (r.psnr_capped ? "true" : "false")
        << ", \"ncc\": " << eval_detail::fmt_g(r.ncc)
        << ", \"ssim\": " << eval_detail::fmt_g(r.ssim)
        << ", \"nmse\": " << eval_detail::fmt_g(r.nmse) << "}"
        << (i + 1 < rep.rows.size() ? "," : "") << "\n";
  }
  out << "  ]\n}\n";
  if (!out.good()) throw IoError(cat("failed writing '", path.string(), "'"));
}

}  // namespace uvi
