#pragma once
// Adam with global-norm gradient clipping. Moment buffers are created lazily
// on the first step and keyed by position in the bind list, which is the same
// fixed parameter order everywhere (visit order of the nets).

#include <cmath>
#include <cstdint>
#include <vector>

#include "uvi/common.hpp"
#include "uvi/nets.hpp"
#include "uvi/tensor.hpp"

namespace uvi {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

template <class S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps() const { return steps_; }

  // Exposed for checkpointing; shapes mirror the parameter list.
  std::vector<Tensor<S>>& exp_avg() { return m_; }
  std::vector<Tensor<S>>& exp_avg_sq() { return v_; }
  void set_steps(std::int64_t s) { steps_ = s; }

  // One update over (master tensor, bound leaf) pairs. Leaves whose gradient
  // never materialized count as zero gradient.
  void step(const BindList<S>& bound) {
    if (m_.empty()) {
      m_.reserve(bound.size());
      v_.reserve(bound.size());
      for (const auto& [master, node] : bound) {
        (void)node;
        Tensor<S> z = Tensor<S>::like(*master);
        m_.push_back(z);
        v_.push_back(std::move(z));
      }
    }
    require(m_.size() == bound.size(), "optimizer bound to a different model");

    double norm_sq = 0.0;
    for (const auto& [master, node] : bound) {
      (void)master;
      if (!node->grad_live) continue;
      const Tensor<S>& g = node->grad;
      for (std::size_t i = 0; i < g.numel(); ++i)
        norm_sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    }
    const double norm = std::sqrt(norm_sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
      scale = cfg_.clip_norm / norm;

    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));

    for (std::size_t k = 0; k < bound.size(); ++k) {
      Tensor<S>& p = *bound[k].first;
      const Node<S>* node = bound[k].second;
      require(m_[k].same_shape(p), "optimizer slot shape mismatch");
      Tensor<S>& m = m_[k];
      Tensor<S>& v = v_[k];
      const bool has_g = node->grad_live;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double g =
            has_g ? static_cast<double>(node->grad[i]) * scale : 0.0;
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) +
                          (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) +
                          (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        const double update =
            cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        p[i] = static_cast<S>(static_cast<double>(p[i]) - update);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t steps_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

}  // namespace uvi
