#pragma once

// Maps a joint-space embedding (width C_I) to a single condition token in the
// language model's width C:
//
//   F0      = F w0
//   F(i+1)  = F(i) + ((N(i) w2) * SiLU(N(i) w1)) w3,  N(i) = RMSNorm(F(i)),  i = 0, 1, 2
//
// RMSNorm is applied to the block input feeding both branches; the residual
// carries the un-normalized F(i). No norm follows the last block.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "bindllm/encoders.hpp"
#include "bindllm/tape.hpp"

namespace bindllm {

struct BindDims {
  std::size_t joint = 64;   // C_I
  std::size_t model = 128;  // C
  std::size_t hidden = 256; // C_h
};

inline constexpr std::size_t kBindBlocks = 3;
inline constexpr double kNormEps = 1e-6;

struct BindBlock {
  Parameter w1, w2, w3, norm_gain;
};

class BindNetwork {
 public:
  BindNetwork() = default;

  // w0, w1, w2 ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); w3 = 0 so each block starts as the identity.
  static BindNetwork init(const BindDims& d, std::uint64_t seed) {
    if (d.joint == 0 || d.model == 0 || d.hidden == 0) throw ConfigError("bind dims must be positive");
    CounterRng rng = CounterRng(seed).fork(0xb1d);
    BindNetwork net;
    net.dims_ = d;
    const auto bound = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    net.w0_ = Parameter("bind.w0", ParamGroup::bind_network,
                        Tensor::uniform(d.joint, d.model, bound(d.joint), rng));
    for (std::size_t b = 0; b < kBindBlocks; ++b) {
      const std::string p = "bind.block" + std::to_string(b) + ".";
      auto& blk = net.blocks_[b];
      blk.w1 = Parameter(p + "w1", ParamGroup::bind_network,
                         Tensor::uniform(d.model, d.hidden, bound(d.model), rng));
      blk.w2 = Parameter(p + "w2", ParamGroup::bind_network,
                         Tensor::uniform(d.model, d.hidden, bound(d.model), rng));
      blk.w3 = Parameter(p + "w3", ParamGroup::bind_network, Tensor::zeros(d.hidden, d.model));
      blk.norm_gain = Parameter(p + "norm", ParamGroup::bind_network,
                                Tensor::filled(1, d.model, 1.0), /*decays=*/false);
    }
    return net;
  }

  const BindDims& dims() const noexcept { return dims_; }
  Parameter& w0() noexcept { return w0_; }
  const Parameter& w0() const noexcept { return w0_; }
  BindBlock& block(std::size_t i) { return blocks_.at(i); }
  const BindBlock& block(std::size_t i) const { return blocks_.at(i); }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&w0_};
    for (auto& b : blocks_) ps.insert(ps.end(), {&b.w1, &b.w2, &b.w3, &b.norm_gain});
    return ps;
  }

  std::size_t parameter_count() const {
    return dims_.joint * dims_.model +
           kBindBlocks * (2 * dims_.model * dims_.hidden + dims_.hidden * dims_.model + dims_.model);
  }

  // Differentiable forward on a tape; `f` is a [1 x C_I] row.
  Var forward(Tape& tape, Var f) {
    if (f.value().size() != dims_.joint) {
      throw DimensionError("bind_forward: input " + shape_str(f.value().shape()) + ", expected [1x" +
                           std::to_string(dims_.joint) + "]");
    }
    Var x = ops::matmul(f, tape.param(w0_));
    for (auto& b : blocks_) {
      Var n = ops::rmsnorm(x, tape.param(b.norm_gain), kNormEps);
      Var gate = ops::silu(ops::matmul(n, tape.param(b.w1)));
      Var up = ops::matmul(n, tape.param(b.w2));
      x = ops::add(x, ops::matmul(ops::mul(up, gate), tape.param(b.w3)));
    }
    return x;
  }

  Tensor forward(const Tensor& f) {
    Tape tape;
    return forward(tape, tape.constant(f)).value();
  }

 private:
  BindDims dims_;
  Parameter w0_;
  std::array<BindBlock, kBindBlocks> blocks_;
};

inline Tensor bind_forward(BindNetwork& net, const JointEmbedding& f) { return net.forward(f.vector()); }

}  // namespace bindllm
