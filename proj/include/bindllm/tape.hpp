#pragma once

// Reverse-mode differentiation over a linear tape. Each primitive records its
// output value plus a closure that, given the output gradient, accumulates
// gradients into its inputs. backward() replays the tape once in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bindllm/kernels.hpp"
#include "bindllm/tensor.hpp"

namespace bindllm {

enum class ParamGroup { bind_network, gates, lora, bias_norm, base_lm, encoders };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::bind_network: return "bind_network";
    case ParamGroup::gates: return "gates";
    case ParamGroup::lora: return "lora";
    case ParamGroup::bias_norm: return "bias_norm";
    case ParamGroup::base_lm: return "base_lm";
    case ParamGroup::encoders: return "encoders";
  }
  return "?";
}

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::base_lm;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  // Weight decay applies to dense matrices only; gates, norm gains and biases are exempt.
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, ParamGroup g, Tensor v, bool decays = true)
      : name(std::move(n)), group(g), value(std::move(v)), grad(value.shape()), decay(decays) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    n.name = "constant";
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var param(Parameter& p) {
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.needs_grad = p.trainable;
    n.name = p.name.c_str();
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, const char* name, Backward fn) {
    value.require_finite(name);
    Node n;
    n.owned = std::move(value);
    n.name = name;
    for (const Var& v : inputs) n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient accumulator for node `id`; parameter leaves write straight into
  // Parameter::grad.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.param) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
      return n.param->grad;
    }
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
  }

  const Tensor* grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.param) return &n.param->grad;
    return n.grad.empty() ? nullptr : &n.grad;
  }

  void backward(Var loss) {
    if (value(loss.id()).size() != 1) {
      throw DimensionError("backward: loss must be a scalar, got " +
                           shape_str(value(loss.id()).shape()));
    }
    visits_.clear();
    if (!nodes_[loss.id()].needs_grad) return;
    grad_buffer(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.needs_grad || n.grad.empty()) continue;
      visits_.push_back(i);
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const char* name(std::size_t id) const { return nodes_[id].name; }
  // Node ids whose backward ran during the last backward(), in visit order.
  const std::vector<std::size_t>& visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    bool needs_grad = false;
    const char* name = "";
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> visits_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

namespace ops {

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  Tensor out = kernel::matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, "matmul", [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    if (a.needs_grad()) kernel::matmul_nt_acc(g, b.value(), tp.grad_buffer(a.id()));
    if (b.needs_grad()) kernel::matmul_tn_acc(a.value(), g, tp.grad_buffer(b.id()));
  });
}

// a[m x k] * b[n x k]^T, the layout used by linear layers storing W as [out x in].
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape();
  Tensor out = kernel::matmul_nt(a.value(), b.value());
  return t.record(std::move(out), {a, b}, "matmul_nt", [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    if (a.needs_grad()) kernel::matmul_acc(g, b.value(), tp.grad_buffer(a.id()));
    if (b.needs_grad()) kernel::matmul_tn_acc(g, a.value(), tp.grad_buffer(b.id()));
  });
}

inline Var add(Var a, Var b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return a.tape()->record(std::move(out), {a, b}, "add", [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    if (a.needs_grad()) tp.grad_buffer(a.id()) += g;
    if (b.needs_grad()) tp.grad_buffer(b.id()) += g;
  });
}

// x[n x c] + row[1 x c] broadcast over rows.
inline Var add_row(Var x, Var row) {
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw DimensionError("add_row: " + shape_str(xv.shape()) + " and " + shape_str(rv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += rv[j];
  }
  return x.tape()->record(std::move(out), {x, row}, "add_row", [x, row](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    if (x.needs_grad()) tp.grad_buffer(x.id()) += g;
    if (row.needs_grad()) {
      Tensor& gr = tp.grad_buffer(row.id());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto gi = g.row_span(i);
        for (std::size_t j = 0; j < gi.size(); ++j) gr[j] += gi[j];
      }
    }
  });
}

// Gated condition injection: x[n x c] + gates[index] * cond[1 x c] on every row.
inline Var inject(Var x, Var cond, Var gates, std::size_t index) {
  const Tensor& xv = x.value();
  const Tensor& cv = cond.value();
  if (cv.size() != xv.cols()) {
    throw DimensionError("inject: condition " + shape_str(cv.shape()) + " vs hidden " +
                         shape_str(xv.shape()));
  }
  if (index >= gates.value().size()) throw DimensionError("inject: gate index out of range");
  const double g = gates.value()[index];
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row_span(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += cv[j] * g;
  }
  return x.tape()->record(std::move(out), {x, cond, gates}, "inject",
                          [x, cond, gates, index](Tape& tp, std::size_t self) {
    const Tensor& gy = *tp.grad(self);
    const Tensor& cv = cond.value();
    const double g = gates.value()[index];
    if (x.needs_grad()) tp.grad_buffer(x.id()) += gy;
    if (cond.needs_grad() || gates.needs_grad()) {
      std::vector<double> colsum(cv.size(), 0.0);
      for (std::size_t i = 0; i < gy.rows(); ++i) {
        auto gi = gy.row_span(i);
        for (std::size_t j = 0; j < gi.size(); ++j) colsum[j] += gi[j];
      }
      if (cond.needs_grad()) {
        Tensor& gc = tp.grad_buffer(cond.id());
        for (std::size_t j = 0; j < colsum.size(); ++j) gc[j] += g * colsum[j];
      }
      if (gates.needs_grad()) {
        double s = 0.0;
        for (std::size_t j = 0; j < colsum.size(); ++j) s += colsum[j] * cv[j];
        tp.grad_buffer(gates.id())[index] += s;
      }
    }
  });
}

inline Var mul(Var a, Var b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, "mul", [a, b](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    if (a.needs_grad()) {
      Tensor& ga = tp.grad_buffer(a.id());
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.needs_grad()) {
      Tensor& gb = tp.grad_buffer(b.id());
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return a.tape()->record(std::move(out), {a}, "scale", [a, s](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    Tensor& ga = tp.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var silu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = kernel::silu(v);
  return a.tape()->record(std::move(out), {a}, "silu", [a](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    const Tensor& x = a.value();
    Tensor& ga = tp.grad_buffer(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * kernel::silu_grad(x[i]);
  });
}

inline Var rmsnorm(Var x, Var gain, double eps) {
  std::vector<double> inv;
  Tensor out = kernel::rmsnorm_rows(x.value(), gain.value(), eps, &inv);
  return x.tape()->record(std::move(out), {x, gain}, "rmsnorm",
                          [x, gain, inv = std::move(inv)](Tape& tp, std::size_t self) {
    const Tensor& gy = *tp.grad(self);
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const std::size_t c = xv.cols();
    Tensor* gx = x.needs_grad() ? &tp.grad_buffer(x.id()) : nullptr;
    Tensor* gg = gain.needs_grad() ? &tp.grad_buffer(gain.id()) : nullptr;
    std::vector<double> dn(c);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      auto xi = xv.row_span(i);
      auto gi = gy.row_span(i);
      const double r = inv[i];
      double m = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double nj = xi[j] * r;
        if (gg) (*gg)[j] += gi[j] * nj;
        dn[j] = gi[j] * gv[j];
        m += dn[j] * nj;
      }
      m /= static_cast<double>(c);
      if (gx) {
        auto gxi = gx->row_span(i);
        for (std::size_t j = 0; j < c; ++j) gxi[j] += r * (dn[j] - xi[j] * r * m);
      }
    }
  });
}

inline Var embedding(Var table, std::span<const int> tokens) {
  const Tensor& w = table.value();
  const std::size_t vocab = w.rows(), c = w.cols();
  if (tokens.empty()) throw EmptyBatchError("embedding: empty token sequence");
  Tensor out = Tensor::zeros(tokens.size(), c);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= vocab) {
      throw VocabularyError("token id " + std::to_string(tokens[t]) + " at position " +
                            std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    auto src = w.row_span(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), out.row_span(t).begin());
  }
  std::vector<int> toks(tokens.begin(), tokens.end());
  return table.tape()->record(std::move(out), {table}, "embedding",
                              [table, toks = std::move(toks)](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    Tensor& gw = tp.grad_buffer(table.id());
    for (std::size_t t = 0; t < toks.size(); ++t) {
      auto gi = g.row_span(t);
      auto dst = gw.row_span(static_cast<std::size_t>(toks[t]));
      for (std::size_t j = 0; j < gi.size(); ++j) dst[j] += gi[j];
    }
  });
}

inline Var rope(Var x, std::size_t heads, double base) {
  Tensor out = x.value();
  kernel::rope_inplace(out, heads, 0, base, 1.0);
  return x.tape()->record(std::move(out), {x}, "rope", [x, heads, base](Tape& tp, std::size_t self) {
    Tensor g = *tp.grad(self);
    kernel::rope_inplace(g, heads, 0, base, -1.0);
    tp.grad_buffer(x.id()) += g;
  });
}

inline Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  const Tensor& qv = q.value();
  const std::size_t n = qv.rows(), c = qv.cols();
  if (c % heads != 0) throw DimensionError("attention: width not divisible by head count");
  qv.require_same_shape(k.value(), "attention q/k");
  qv.require_same_shape(v.value(), "attention q/v");
  Tensor out = Tensor::zeros(n, c);
  // probs for row t live at heads * t(t+1)/2, head-major, t+1 entries per head.
  std::vector<double> probs(heads * n * (n + 1) / 2);
  for (std::size_t t = 0; t < n; ++t) {
    kernel::attend_row(qv.row_span(t), k.value(), v.value(), t, heads, out.row_span(t),
                       probs.data() + heads * t * (t + 1) / 2);
  }
  return q.tape()->record(std::move(out), {q, k, v}, "causal_attention",
                          [q, k, v, heads, probs = std::move(probs)](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad(self);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t n = qv.rows(), c = qv.cols(), hd = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor* gq = q.needs_grad() ? &tp.grad_buffer(q.id()) : nullptr;
    Tensor* gk = k.needs_grad() ? &tp.grad_buffer(k.id()) : nullptr;
    Tensor* gv = v.needs_grad() ? &tp.grad_buffer(v.id()) : nullptr;
    std::vector<double> dp(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double* base = probs.data() + heads * t * (t + 1) / 2;
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = base + h * (t + 1);
        const double* go = g.row_span(t).data() + h * hd;
        double dot_pd = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vs = vv.row_span(s).data() + h * hd;
          double d = 0.0;
          for (std::size_t i = 0; i < hd; ++i) d += go[i] * vs[i];
          dp[s] = d;
          dot_pd += p[s] * d;
          if (gv) {
            double* gvs = gv->row_span(s).data() + h * hd;
            for (std::size_t i = 0; i < hd; ++i) gvs[i] += p[s] * go[i];
          }
        }
        const double* qt = qv.row_span(t).data() + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = p[s] * (dp[s] - dot_pd) * sc;
          if (gq) {
            const double* ks = kv.row_span(s).data() + h * hd;
            double* gqt = gq->row_span(t).data() + h * hd;
            for (std::size_t i = 0; i < hd; ++i) gqt[i] += ds * ks[i];
          }
          if (gk) {
            double* gks = gk->row_span(s).data() + h * hd;
            for (std::size_t i = 0; i < hd; ++i) gks[i] += ds * qt[i];
          }
        }
      }
    }
  });
}

inline constexpr int kIgnoreIndex = -100;

// Mean negative log-likelihood over positions whose target != ignore_index.
inline Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                                 int ignore_index = kIgnoreIndex) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows(), vocab = lv.cols();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw VocabularyError("target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(vocab) + ")");
    }
    ++count;
  }
  if (count == 0) throw EmptyBatchError("cross_entropy: every position is ignored");
  Tensor logp = Tensor::zeros(n, vocab);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    kernel::log_softmax_row(lv.row_span(i), logp.row_span(i));
    total -= logp(i, static_cast<std::size_t>(targets[i]));
  }
  const double loss = total / static_cast<double>(count);
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape()->record(
      Tensor(Shape{1, 1}, {loss}), {logits}, "softmax_cross_entropy",
      [logits, tg = std::move(tg), logp = std::move(logp), count, ignore_index](Tape& tp,
                                                                                 std::size_t self) {
        const double g = (*tp.grad(self))[0] / static_cast<double>(count);
        Tensor& gl = tp.grad_buffer(logits.id());
        for (std::size_t i = 0; i < tg.size(); ++i) {
          if (tg[i] == ignore_index) continue;
          auto lp = logp.row_span(i);
          auto gi = gl.row_span(i);
          for (std::size_t j = 0; j < lp.size(); ++j) gi[j] += g * std::exp(lp[j]);
          gi[static_cast<std::size_t>(tg[i])] -= g;
        }
      });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return a.tape()->record(Tensor(Shape{1, 1}, {s}), {a}, "sum", [a](Tape& tp, std::size_t self) {
    const double g = (*tp.grad(self))[0];
    Tensor& ga = tp.grad_buffer(a.id());
    for (double& v : ga.storage()) v += g;
  });
}

}  // namespace ops
}  // namespace bindllm
