#pragma once

// Adam with bias-corrected moments and decoupled weight decay, plus the
// warmup + cosine learning-rate schedule used by every training stage.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "bindllm/tape.hpp"

namespace bindllm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;  // applied only to parameters flagged `decay`
  double clip_norm = 1.0;      // global gradient-norm clip, 0 disables
};

class Adam {
 public:
  Adam(std::span<Parameter* const> params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      slots_.push_back({p, Tensor(p->value.shape()), Tensor(p->value.shape())});
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& sl : slots_)
      for (double g : sl.p->grad.storage()) s += g * g;
    return std::sqrt(s);
  }

  // One update at learning rate `lr`; returns the pre-clip gradient norm.
  double step(double lr) {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& sl : slots_) {
      Tensor& w = sl.p->value;
      const Tensor& g = sl.p->grad;
      const double wd = sl.p->decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * clip;
        sl.m[i] = cfg_.beta1 * sl.m[i] + (1.0 - cfg_.beta1) * gi;
        sl.v[i] = cfg_.beta2 * sl.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = sl.m[i] / c1;
        const double vhat = sl.v[i] / c2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[i]);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& sl : slots_) sl.p->grad.fill(0.0);
  }

 private:
  struct Slot {
    Parameter* p;
    Tensor m, v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

// Linear warmup over `warmup` steps, then cosine decay toward zero across
// the remaining steps (the last step keeps a small positive rate).
inline double scheduled_lr(double base, std::size_t step, std::size_t total, std::size_t warmup) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace bindllm
