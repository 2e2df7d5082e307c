#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "oracles.hpp"
#include "uvi/evalkit.hpp"
#include "uvi/rng.hpp"

using F = float;

namespace {

uvi::Volume<F> random_volume(int d, int h, int w, std::uint64_t seed,
                             double lo = 0.0, double hi = 1.0) {
  uvi::Volume<F> v(1, d, h, w);
  uvi::Rng rng(seed);
  testutil::fill_uniform(v.data, rng, lo, hi);
  return v;
}

uvi::Volume<F> noisy(const uvi::Volume<F>& v, double sigma, std::uint64_t seed) {
  uvi::Volume<F> out = v;
  uvi::Rng rng(seed);
  for (std::size_t i = 0; i < out.data.numel(); ++i)
    out.data[i] += static_cast<F>(sigma * rng.normal());
  return out;
}

}  // namespace

TEST_CASE("psnr matches the direct formula and caps only exact matches") {
  auto gt = random_volume(7, 8, 9, 21);

  auto same = uvi::psnr(gt, gt);
  CHECK(same.db == 100.0);
  CHECK(same.capped);

  // a uniform offset of 0.1 gives MSE 0.01 and so 20 dB
  uvi::Volume<F> off(uvi::Tensor<F>::like(gt.data));
  for (std::size_t i = 0; i < gt.data.numel(); ++i)
    off.data[i] = gt.data[i] + 0.1f;
  auto twenty = uvi::psnr(gt, off);
  CHECK(std::abs(twenty.db - 20.0) < 1e-5);
  CHECK_FALSE(twenty.capped);

  // a single tiny deviation can exceed 100 dB, but is never marked capped
  uvi::Volume<F> nearly = gt;
  nearly.data[0] += 1e-6f;
  auto big = uvi::psnr(gt, nearly);
  CHECK(big.db > 100.0);
  CHECK_FALSE(big.capped);

  auto pred = noisy(gt, 0.07, 22);
  const double want = oracle::psnr(testutil::to_oracle(gt.data),
                                   testutil::to_oracle(pred.data));
  CHECK(std::abs(uvi::psnr(gt, pred).db - want) < 1e-9);

  uvi::Volume<F> other(1, 7, 8, 10);
  CHECK_THROWS_AS(uvi::psnr(gt, other), uvi::ContractViolation);
}

TEST_CASE("ncc_global is the Pearson correlation over all voxels") {
  auto a = random_volume(6, 7, 8, 23);
  CHECK(std::abs(uvi::ncc_global(a, a) - 1.0) < 1e-12);

  // invariant to positive affine maps, negated by negative ones
  uvi::Volume<F> pos(uvi::Tensor<F>::like(a.data));
  uvi::Volume<F> neg(uvi::Tensor<F>::like(a.data));
  for (std::size_t i = 0; i < a.data.numel(); ++i) {
    pos.data[i] = 2.5f * a.data[i] + 0.3f;
    neg.data[i] = -1.5f * a.data[i] + 0.8f;
  }
  CHECK(std::abs(uvi::ncc_global(a, pos) - 1.0) < 1e-6);
  CHECK(std::abs(uvi::ncc_global(a, neg) + 1.0) < 1e-6);

  auto b = noisy(a, 0.2, 24);
  const double want = oracle::pearson(testutil::to_oracle(a.data),
                                      testutil::to_oracle(b.data));
  CHECK(std::abs(uvi::ncc_global(a, b) - want) < 1e-9);

  uvi::Volume<F> flat(1, 4, 4, 4, F(0.5));
  CHECK_THROWS_AS(uvi::ncc_global(a, flat), uvi::ContractViolation);
  CHECK_THROWS_AS(uvi::ncc_global(flat, a), uvi::ContractViolation);
}

TEST_CASE("ssim3d matches the truncated-window oracle") {
  auto a = random_volume(9, 9, 9, 25);
  CHECK(std::abs(uvi::ssim3d(a, a) - 1.0) < 1e-6);

  // a constant bias hurts the luminance term
  uvi::Volume<F> biased(uvi::Tensor<F>::like(a.data));
  for (std::size_t i = 0; i < a.data.numel(); ++i)
    biased.data[i] = a.data[i] + 0.5f;
  CHECK(uvi::ssim3d(a, biased) < 0.9);

  auto b = noisy(a, 0.1, 26);
  const double want = oracle::ssim3d(testutil::to_oracle(a.data),
                                     testutil::to_oracle(b.data), 7, 0.01, 0.03);
  CHECK(std::abs(uvi::ssim3d(a, b) - want) < 1e-9);
  const double want5 = oracle::ssim3d(testutil::to_oracle(a.data),
                                      testutil::to_oracle(b.data), 5, 0.01, 0.03);
  CHECK(std::abs(uvi::ssim3d(a, b, 5) - want5) < 1e-9);

  // bounded by 1 for nonnegative inputs
  const double s = uvi::ssim3d(a, b);
  CHECK(s > 0.0);
  CHECK(s <= 1.0);

  CHECK_THROWS_AS(uvi::ssim3d(a, b, 4), uvi::ContractViolation);
  CHECK_THROWS_AS(uvi::ssim3d(a, b, -1), uvi::ContractViolation);
  uvi::Volume<F> other(1, 9, 9, 10);
  CHECK_THROWS_AS(uvi::ssim3d(a, other), uvi::ContractViolation);
}

TEST_CASE("nmse is the error energy over the reference energy") {
  auto gt = random_volume(6, 6, 6, 27, 0.2, 1.0);
  CHECK(uvi::nmse(gt, gt) == 0.0);

  uvi::Volume<F> zero(uvi::Tensor<F>::like(gt.data));
  CHECK(uvi::nmse(gt, zero) == 1.0);  // same sums top and bottom

  auto pred = noisy(gt, 0.1, 28);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < gt.data.numel(); ++i) {
    const double d = double(gt.data[i]) - double(pred.data[i]);
    num += d * d;
    den += double(gt.data[i]) * double(gt.data[i]);
  }
  CHECK(std::abs(uvi::nmse(gt, pred) - num / den) < 1e-12);

  // scaling both volumes cancels
  uvi::Volume<F> gt3(uvi::Tensor<F>::like(gt.data));
  uvi::Volume<F> pred3(uvi::Tensor<F>::like(gt.data));
  for (std::size_t i = 0; i < gt.data.numel(); ++i) {
    gt3.data[i] = 3.0f * gt.data[i];
    pred3.data[i] = 3.0f * pred.data[i];
  }
  CHECK(std::abs(uvi::nmse(gt3, pred3) - uvi::nmse(gt, pred)) < 1e-6);

  CHECK_THROWS_AS(uvi::nmse(zero, gt), uvi::ContractViolation);
}

TEST_CASE("metrics order predictions by noise level") {
  auto gt = random_volume(10, 10, 10, 29);
  double last_psnr = -1e9, last_ssim = -1e9, last_nmse = 1e9;
  for (const double sigma : {0.4, 0.2, 0.1, 0.05, 0.01}) {
    auto pred = noisy(gt, sigma, 30);
    const double p = uvi::psnr(gt, pred).db;
    const double s = uvi::ssim3d(gt, pred);
    const double e = uvi::nmse(gt, pred);
    CHECK(p > last_psnr);
    CHECK(s > last_ssim);
    CHECK(e < last_nmse);
    last_psnr = p;
    last_ssim = s;
    last_nmse = e;
  }
}

TEST_CASE("evaluate_sequence fills rows, means and the capped flag") {
  auto gt = random_volume(6, 7, 8, 31);
  std::vector<uvi::Volume<F>> gts{gt, gt, gt};
  std::vector<uvi::Volume<F>> preds{gt, noisy(gt, 0.05, 32), noisy(gt, 0.2, 33)};
  const std::vector<double> ts{0.25, 0.5, 0.75};

  auto rep = uvi::evaluate_sequence(gts, preds, ts);
  REQUIRE(rep.rows.size() == 3);
  CHECK(rep.any_capped);
  CHECK(rep.rows[0].psnr_capped);
  CHECK_FALSE(rep.rows[1].psnr_capped);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rep.rows[i].t == ts[i]);
    CHECK(rep.rows[i].psnr_db == uvi::psnr(gts[i], preds[i]).db);
    CHECK(rep.rows[i].nmse == uvi::nmse(gts[i], preds[i]));
  }
  double mp = 0;
  for (const auto& r : rep.rows) mp += r.psnr_db;
  CHECK(std::abs(rep.mean_psnr - mp / 3.0) < 1e-12);

  // means do not care about the order of the rows
  std::vector<uvi::Volume<F>> preds2{preds[2], preds[0], preds[1]};
  std::vector<double> ts2{0.75, 0.25, 0.5};
  auto rep2 = uvi::evaluate_sequence(gts, preds2, ts2);
  CHECK(std::abs(rep2.mean_psnr - rep.mean_psnr) < 1e-9);
  CHECK(std::abs(rep2.mean_ssim - rep.mean_ssim) < 1e-9);

  std::vector<double> short_ts{0.5};
  CHECK_THROWS_AS(uvi::evaluate_sequence(gts, preds, short_ts),
                  uvi::ContractViolation);
  std::vector<uvi::Volume<F>> none;
  std::vector<double> no_ts;
  CHECK_THROWS_AS(uvi::evaluate_sequence(none, none, no_ts),
                  uvi::ContractViolation);
}

TEST_CASE("reports round-trip through CSV and JSON") {
  auto gt = random_volume(6, 6, 6, 34);
  std::vector<uvi::Volume<F>> gts{gt, gt};
  std::vector<uvi::Volume<F>> preds{noisy(gt, 0.03, 35), noisy(gt, 0.11, 36)};
  auto rep = uvi::evaluate_sequence(gts, preds, {0.3, 0.6});
  rep.checkpoint_hash = "deadbeef01234567";
  rep.dataset_id = "unit \"quoted\" id";
  rep.mode = "cycle";

  testutil::TempDir tmp("evalkit");
  const auto csv_path = tmp.path() / "report.csv";
  uvi::write_csv(rep, csv_path);
  std::ifstream in(csv_path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "t,psnr_db,ncc,ssim,nmse");
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::strtod(cell.c_str(), nullptr));
    REQUIRE(vals.size() == 5);
    const auto& r = rep.rows[static_cast<std::size_t>(rows)];
    CHECK(vals[0] == r.t);  // %.17g round-trips doubles exactly
    CHECK(vals[1] == r.psnr_db);
    CHECK(vals[2] == r.ncc);
    CHECK(vals[3] == r.ssim);
    CHECK(vals[4] == r.nmse);
    ++rows;
  }
  CHECK(rows == 2);

  const auto json_path = tmp.path() / "report.json";
  uvi::write_json(rep, json_path);
  std::ifstream jin(json_path);
  nlohmann::json j = nlohmann::json::parse(jin);
  CHECK(j["checkpoint_hash"] == "deadbeef01234567");
  CHECK(j["dataset_id"] == "unit \"quoted\" id");
  CHECK(j["mode"] == "cycle");
  CHECK(j["rows"].size() == 2);
  CHECK(j["mean_psnr_db"].get<double>() == rep.mean_psnr);
  CHECK(j["any_psnr_capped"].get<bool>() == rep.any_capped);
  CHECK(j["rows"][1]["ncc"].get<double>() == rep.rows[1].ncc);
  CHECK(j["rows"][0]["psnr_capped"].get<bool>() == rep.rows[0].psnr_capped);

  CHECK_THROWS_AS(uvi::write_csv(rep, tmp.path() / "missing" / "x.csv"),
                  uvi::IoError);
  CHECK_THROWS_AS(uvi::write_json(rep, tmp.path() / "missing" / "x.json"),
                  uvi::IoError);
}
