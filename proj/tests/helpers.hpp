#pragma once
// Shared test utilities: conversions to/from the oracle types, random fills,
// and a scratch directory helper for tests that touch the filesystem.

#include <filesystem>
#include <random>
#include <string>

#include "oracles.hpp"
#include "uvi/rng.hpp"
#include "uvi/tensor.hpp"
#include "uvi/volume.hpp"

namespace testutil {

template <class S>
void fill_uniform(uvi::Tensor<S>& t, uvi::Rng& rng, double lo, double hi) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(rng.uniform(lo, hi));
}

template <class S>
oracle::Vol to_oracle(const uvi::Tensor<S>& t) {
  oracle::Vol v(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  for (std::size_t i = 0; i < t.numel(); ++i)
    v.v[i] = static_cast<double>(t[i]);
  return v;
}

template <class S>
double max_abs_diff(const uvi::Tensor<S>& t, const oracle::Vol& v) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double d = std::abs(static_cast<double>(t[i]) - v.v[i]);
    if (d > m) m = d;
  }
  return m;
}

// |a-b| <= atol + rtol*max(|a|,|b|) over all elements, against oracle values.
template <class S>
bool close_to(const uvi::Tensor<S>& t, const oracle::Vol& v, double atol,
              double rtol) {
  if (t.numel() != v.n()) return false;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double a = static_cast<double>(t[i]);
    const double b = v.v[i];
    const double mag = std::abs(a) > std::abs(b) ? std::abs(a) : std::abs(b);
    if (std::abs(a - b) > atol + rtol * mag) return false;
  }
  return true;
}

// Unique scratch directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    std::random_device rd;
    path_ = base / (tag + "-" + std::to_string(rd()) + "-" +
                    std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
