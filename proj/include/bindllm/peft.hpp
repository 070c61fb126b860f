#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bindllm/tape.hpp"

namespace bindllm {

// Rank 8 keeps the stage-2 trainable share under 10% of the toy model.
inline constexpr std::size_t kDefaultLoraRank = 8;

// Low-rank update dW = s * B A with A: [r x in], B: [out x r], s = 1 / r.
// B starts at zero, so a fresh adapter is an exact no-op.
struct LoraAdapter {
  Parameter a;
  Parameter b;
  std::size_t rank = 0;
  double scaling = 1.0;

  static LoraAdapter make(const std::string& prefix, std::size_t in, std::size_t out,
                          std::size_t rank, CounterRng& rng) {
    if (rank == 0 || rank > std::min(in, out)) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " invalid for a " + std::to_string(out) +
                        "x" + std::to_string(in) + " layer (need 1 <= r <= min(in, out))");
    }
    LoraAdapter ad;
    ad.rank = rank;
    ad.scaling = 1.0 / static_cast<double>(rank);
    ad.a = Parameter(prefix + ".lora_a", ParamGroup::lora,
                     Tensor::uniform(rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    ad.b = Parameter(prefix + ".lora_b", ParamGroup::lora, Tensor::zeros(out, rank));
    return ad;
  }
};

// y = x W^T + s (x A^T) B^T + bias, with W stored as [out x in].
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, CounterRng& rng,
         double init_scale = 1.0)
      : weight_(name + ".weight", ParamGroup::base_lm,
                Tensor::uniform(out, in, init_scale / std::sqrt(static_cast<double>(in)), rng)),
        bias_(name + ".bias", ParamGroup::bias_norm, Tensor::zeros(1, out), /*decays=*/false),
        name_(name) {}

  std::size_t in_features() const { return weight_.value.cols(); }
  std::size_t out_features() const { return weight_.value.rows(); }
  const std::string& name() const noexcept { return name_; }

  Parameter& weight() noexcept { return weight_; }
  const Parameter& weight() const noexcept { return weight_; }
  Parameter& bias() noexcept { return bias_; }
  const Parameter& bias() const noexcept { return bias_; }
  std::optional<LoraAdapter>& lora() noexcept { return lora_; }
  const std::optional<LoraAdapter>& lora() const noexcept { return lora_; }

  void attach_lora(std::size_t rank, CounterRng& rng) {
    lora_ = LoraAdapter::make(name_, in_features(), out_features(), rank, rng);
  }

  // Folds the adapter into the dense weight and drops it.
  void merge_lora();

  Var forward(Tape& tape, Var x) {
    Var y = ops::matmul_nt(x, tape.param(weight_));
    if (lora_) {
      Var low = ops::scale(ops::matmul_nt(x, tape.param(lora_->a)), lora_->scaling);
      y = ops::add(y, ops::matmul_nt(low, tape.param(lora_->b)));
    }
    return ops::add_row(y, tape.param(bias_));
  }

  // Tape-free evaluation performing the same arithmetic in the same order.
  Tensor apply(const Tensor& x) const {
    Tensor y = kernel::matmul_nt(x, weight_.value);
    if (lora_) {
      Tensor low = kernel::matmul_nt(x, lora_->a.value);
      for (double& v : low.storage()) v *= lora_->scaling;
      y += kernel::matmul_nt(low, lora_->b.value);
    }
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto r = y.row_span(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias_.value[j];
    }
    return y;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&weight_, &bias_};
    if (lora_) ps.insert(ps.end(), {&lora_->a, &lora_->b});
    return ps;
  }

 private:
  Parameter weight_;
  Parameter bias_;
  std::optional<LoraAdapter> lora_;
  std::string name_;
};

// Standalone adapted projection without bias: x W^T + s x A^T B^T.
inline Tensor lora_forward(const Tensor& base_weight, const LoraAdapter& adapter, const Tensor& x,
                           const Tensor* bias = nullptr) {
  if (x.cols() != base_weight.cols() || adapter.a.value.cols() != base_weight.cols() ||
      adapter.b.value.rows() != base_weight.rows()) {
    throw DimensionError("lora_forward: x " + shape_str(x.shape()) + ", W " +
                         shape_str(base_weight.shape()) + ", A " + shape_str(adapter.a.value.shape()) +
                         ", B " + shape_str(adapter.b.value.shape()));
  }
  Tensor y = kernel::matmul_nt(x, base_weight);
  Tensor low = kernel::matmul_nt(x, adapter.a.value);
  for (double& v : low.storage()) v *= adapter.scaling;
  y += kernel::matmul_nt(low, adapter.b.value);
  if (bias) {
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += (*bias)[j];
  }
  return y;
}

// W' = W + s * B A
inline Tensor merge(const LoraAdapter& adapter, const Tensor& base_weight) {
  adapter.a.value.require_finite("merge: adapter A");
  adapter.b.value.require_finite("merge: adapter B");
  Tensor delta = kernel::matmul(adapter.b.value, adapter.a.value);
  delta.require_same_shape(base_weight, "merge");
  Tensor out = base_weight;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += adapter.scaling * delta[i];
  return out;
}

inline void Linear::merge_lora() {
  if (!lora_) return;
  weight_.value = merge(*lora_, weight_.value);
  lora_.reset();
}

// Which parameter groups train in a stage. Encoders are never trainable.
struct ParamGroups {
  std::set<ParamGroup> trainable;

  static ParamGroups lm_pretrain() { return {{ParamGroup::base_lm}}; }
  static ParamGroups pretrain() { return {{ParamGroup::bind_network, ParamGroup::gates}}; }
  static ParamGroups instruct() { return {{ParamGroup::lora, ParamGroup::bias_norm, ParamGroup::gates}}; }

  bool trains(ParamGroup g) const { return trainable.count(g) != 0; }
};

// Flags every parameter trainable or frozen per `plan`, clears gradients and
// returns the number of trainable scalars.
inline std::size_t apply_stage_freeze(std::span<Parameter* const> params, const ParamGroups& plan) {
  if (plan.trains(ParamGroup::encoders)) {
    throw ConfigError("the modality encoders are frozen in every stage");
  }
  std::set<ParamGroup> present;
  for (const Parameter* p : params) present.insert(p->group);
  for (ParamGroup g : plan.trainable) {
    if (!present.count(g)) {
      throw ConfigError(std::string("stage plan references group '") + group_name(g) +
                        "' which the model does not have");
    }
  }
  std::size_t count = 0;
  for (Parameter* p : params) {
    p->trainable = plan.trains(p->group);
    p->grad = Tensor(p->value.shape());
    if (p->trainable) count += p->value.size();
  }
  if (count == 0) throw ConfigError("stage plan leaves no trainable parameters");
  return count;
}

}  // namespace bindllm
