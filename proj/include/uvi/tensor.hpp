#pragma once
// Dense row-major tensor of rank 0..5. Rank-4 tensors are (channels, depth,
// height, width) with width fastest; that layout is assumed throughout the
// library. Conv weights are rank 5 (out, in, kz, ky, kx).

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "uvi/common.hpp"

namespace uvi {

template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::initializer_list<int> dims, S fill = S(0)) {
    require(dims.size() <= 5, "tensor rank must be <= 5");
    rank_ = static_cast<int>(dims.size());
    int i = 0;
    std::size_t n = 1;
    for (int d : dims) {
      require(d > 0, "tensor dims must be positive");
      dims_[static_cast<std::size_t>(i++)] = d;
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, fill);
  }

  static Tensor scalar(S v) {
    Tensor t{};
    t.rank_ = 0;
    t.data_.assign(1, v);
    return t;
  }

  static Tensor like(const Tensor& other, S fill = S(0)) {
    Tensor t = other;
    t.data_.assign(other.numel(), fill);
    return t;
  }

  int rank() const { return rank_; }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-4 accessors.
  int channels() const { return rank_ == 4 ? dims_[0] : (rank_ == 0 ? 0 : dims_[0]); }
  int depth() const { return dims_[1]; }
  int height() const { return dims_[2]; }
  int width() const { return dims_[3]; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(int c, int z, int y, int x) {
    return data_[idx(c, z, y, x)];
  }
  const S& at(int c, int z, int y, int x) const {
    return data_[idx(c, z, y, x)];
  }

  std::size_t idx(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * static_cast<std::size_t>(dims_[1]) +
             static_cast<std::size_t>(z)) *
                static_cast<std::size_t>(dims_[2]) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(dims_[3]) +
           static_cast<std::size_t>(x);
  }

  S* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  const S* channel(int c) const {
    return data_.data() + static_cast<std::size_t>(c) * plane();
  }
  std::size_t plane() const {
    return static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(dims_[2]) *
           static_cast<std::size_t>(dims_[3]);
  }

  bool same_shape(const Tensor& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[static_cast<std::size_t>(i)] != o.dims_[static_cast<std::size_t>(i)])
        return false;
    return true;
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  double sum() const {
    double acc = 0.0;
    for (const S& v : data_) acc += static_cast<double>(v);
    return acc;
  }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void minmax(S& lo, S& hi) const {
    require(!data_.empty(), "minmax of empty tensor");
    lo = hi = data_[0];
    for (const S& v : data_) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }

 private:
  int rank_ = 0;
  std::array<int, 5> dims_{1, 1, 1, 1, 1};
  std::vector<S> data_;
};

}  // namespace uvi
