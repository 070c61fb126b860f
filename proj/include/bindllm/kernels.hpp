#pragma once

// Forward math and backward helpers for the closed set of primitives the
// model needs. Everything here is a pure function of its inputs, and every
// output row depends only on the matching input row (except where a kernel
// explicitly mixes rows, e.g. attention), which makes incremental decoding
// bitwise-identical to full-sequence evaluation.
//
// Summation order: every matrix product accumulates each output element
// over the shared axis k in ascending order (k-innermost per element), so
// results are bit-deterministic for fixed inputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "bindllm/tensor.hpp"

namespace bindllm::kernel {

inline void require_matmul(const Tensor& a, const Tensor& b, std::size_t ka, std::size_t kb,
                           const char* op) {
  if (ka != kb) {
    throw DimensionError(std::string(op) + ": inner dimensions disagree, " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
}

namespace detail {

// Four doubles; with contraction disabled a * b + c stays a separate multiply and add.
typedef double v4d __attribute__((vector_size(32), aligned(8), may_alias));

inline v4d load4(const double* p) { return *reinterpret_cast<const v4d*>(p); }

inline void store4(double* p, v4d v) { *reinterpret_cast<v4d*>(p) = v; }

}  // namespace detail

// out[m x n] += a[m x k] * b[k x n]. Tiles of 4 rows x 8 columns stay in
// registers across the k loop; every element still accumulates its k terms
// in ascending order onto its previous value, so the result matches the
// plain triple loop bit for bit.
inline void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  using detail::v4d;
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require_matmul(a, b, k, b.rows(), "matmul");
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const std::size_t n8 = n - n % 8;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = A + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    for (std::size_t j = 0; j < n8; j += 8) {
      double* c0 = C + i * n + j;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      v4d x00 = detail::load4(c0), x01 = detail::load4(c0 + 4);
      v4d x10 = detail::load4(c1), x11 = detail::load4(c1 + 4);
      v4d x20 = detail::load4(c2), x21 = detail::load4(c2 + 4);
      v4d x30 = detail::load4(c3), x31 = detail::load4(c3 + 4);
      for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = detail::load4(B + p * n + j);
        const v4d b1 = detail::load4(B + p * n + j + 4);
        x00 += a0[p] * b0;
        x01 += a0[p] * b1;
        x10 += a1[p] * b0;
        x11 += a1[p] * b1;
        x20 += a2[p] * b0;
        x21 += a2[p] * b1;
        x30 += a3[p] * b0;
        x31 += a3[p] * b1;
      }
      detail::store4(c0, x00);
      detail::store4(c0 + 4, x01);
      detail::store4(c1, x10);
      detail::store4(c1 + 4, x11);
      detail::store4(c2, x20);
      detail::store4(c2 + 4, x21);
      detail::store4(c3, x30);
      detail::store4(c3 + 4, x31);
    }
    for (std::size_t r = i; r < i + 4; ++r)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[r * k + p];
        for (std::size_t j = n8; j < n; ++j) C[r * n + j] += av * B[p * n + j];
      }
  }
  for (; i < m; ++i) {
    double* ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matmul(a, b, a.cols(), b.rows(), "matmul");
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

inline Tensor transpose(const Tensor& t) {
  const std::size_t r = t.rows(), c = t.cols();
  Tensor out = Tensor::zeros(c, r);
  const double* src = t.data().data();
  double* dst = out.data().data();
  constexpr std::size_t kBlock = 16;
  for (std::size_t i0 = 0; i0 < r; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < c; j0 += kBlock)
      for (std::size_t i = i0; i < std::min(r, i0 + kBlock); ++i)
        for (std::size_t j = j0; j < std::min(c, j0 + kBlock); ++j) dst[j * r + i] = src[i * c + j];
  return out;
}

// a[m x k] * b[n x k]^T, computed as a * transpose(b) so the inner loop runs
// over contiguous memory. Each element still sums k in ascending order from 0.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matmul(a, b, a.cols(), b.cols(), "matmul_nt");
  Tensor out = Tensor::zeros(a.rows(), b.rows());
  matmul_acc(a, transpose(b), out);
  return out;
}

// out[m x n] += a[m x k] * b[n x k]^T; the product is formed first, then added.
inline void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  out += matmul_nt(a, b);
}

// out[k x n] += a[m x k]^T * b[m x n], tiled like matmul_acc: each element
// adds its m terms in ascending order onto its previous value.
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  using detail::v4d;
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require_matmul(a, b, m, b.rows(), "matmul_tn");
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  const std::size_t n8 = n - n % 8;
  std::size_t i = 0;
  for (; i + 4 <= k; i += 4) {
    for (std::size_t j = 0; j < n8; j += 8) {
      double* c0 = C + i * n + j;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      v4d x00 = detail::load4(c0), x01 = detail::load4(c0 + 4);
      v4d x10 = detail::load4(c1), x11 = detail::load4(c1 + 4);
      v4d x20 = detail::load4(c2), x21 = detail::load4(c2 + 4);
      v4d x30 = detail::load4(c3), x31 = detail::load4(c3 + 4);
      for (std::size_t p = 0; p < m; ++p) {
        const v4d b0 = detail::load4(B + p * n + j);
        const v4d b1 = detail::load4(B + p * n + j + 4);
        const double* ap = A + p * k + i;
        x00 += ap[0] * b0;
        x01 += ap[0] * b1;
        x10 += ap[1] * b0;
        x11 += ap[1] * b1;
        x20 += ap[2] * b0;
        x21 += ap[2] * b1;
        x30 += ap[3] * b0;
        x31 += ap[3] * b1;
      }
      detail::store4(c0, x00);
      detail::store4(c0 + 4, x01);
      detail::store4(c1, x10);
      detail::store4(c1 + 4, x11);
      detail::store4(c2, x20);
      detail::store4(c2 + 4, x21);
      detail::store4(c3, x30);
      detail::store4(c3 + 4, x31);
    }
    for (std::size_t r = i; r < i + 4; ++r)
      for (std::size_t j = n8; j < n; ++j) {
        double acc = C[r * n + j];
        for (std::size_t p = 0; p < m; ++p) acc += A[p * k + r] * B[p * n + j];
        C[r * n + j] = acc;
      }
  }
  for (; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = C[i * n + j];
      for (std::size_t p = 0; p < m; ++p) acc += A[p * k + i] * B[p * n + j];
      C[i * n + j] = acc;
    }
}

inline double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

inline double silu(double x) noexcept { return x * sigmoid(x); }

inline double silu_grad(double x) noexcept {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// Row-wise RMSNorm. inv_rms receives 1/sqrt(mean(x^2) + eps) per row.
inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps,
                           std::vector<double>* inv_rms = nullptr) {
  const std::size_t n = x.rows(), c = x.cols();
  if (gain.size() != c) {
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  Tensor y = Tensor::zeros(n, c);
  if (inv_rms) inv_rms->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row_span(i);
    double ms = 0.0;
    for (double v : xi) ms += v * v;
    ms /= static_cast<double>(c);
    const double r = 1.0 / std::sqrt(ms + eps);
    if (inv_rms) (*inv_rms)[i] = r;
    auto yi = y.row_span(i);
    for (std::size_t j = 0; j < c; ++j) yi[j] = xi[j] * r * gain[j];
  }
  return y;
}

// Rotary position embedding on interleaved pairs within each head. `sign`
// = -1 applies the inverse rotation (used by the backward pass).
inline void rope_inplace(Tensor& x, std::size_t heads, std::size_t pos0, double base, double sign) {
  const std::size_t n = x.rows(), c = x.cols();
  const std::size_t hd = c / heads;
  for (std::size_t t = 0; t < n; ++t) {
    const double pos = static_cast<double>(pos0 + t);
    auto row = x.row_span(t);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i + 1 < hd; i += 2) {
        const double theta = pos * std::pow(base, -static_cast<double>(i) / static_cast<double>(hd));
        const double cs = std::cos(theta), sn = sign * std::sin(theta);
        double& a = row[h * hd + i];
        double& b = row[h * hd + i + 1];
        const double a0 = a, b0 = b;
        a = a0 * cs - b0 * sn;
        b = a0 * sn + b0 * cs;
      }
    }
  }
}

// Causal multi-head attention for one query row `t` against keys/values
// rows [0, t]. Writes the head outputs into `out_row` and the attention
// probabilities into `probs` (length t+1 per head, head-major).
inline void attend_row(std::span<const double> q, const Tensor& k, const Tensor& v, std::size_t t,
                       std::size_t heads, std::span<double> out_row, double* probs) {
  const std::size_t c = k.cols();
  const std::size_t hd = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> local;
  if (!probs) {
    local.resize(heads * (t + 1));
    probs = local.data();
  }
  for (std::size_t h = 0; h < heads; ++h) {
    double* p = probs + h * (t + 1);
    double mx = -INFINITY;
    for (std::size_t s = 0; s <= t; ++s) {
      const double* ks = k.row_span(s).data() + h * hd;
      double d = 0.0;
      for (std::size_t i = 0; i < hd; ++i) d += q[h * hd + i] * ks[i];
      p[s] = d * scale;
      mx = std::max(mx, p[s]);
    }
    double z = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      p[s] = std::exp(p[s] - mx);
      z += p[s];
    }
    for (std::size_t s = 0; s <= t; ++s) p[s] /= z;
    double* o = out_row.data() + h * hd;
    for (std::size_t i = 0; i < hd; ++i) o[i] = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      const double* vs = v.row_span(s).data() + h * hd;
      for (std::size_t i = 0; i < hd; ++i) o[i] += p[s] * vs[i];
    }
  }
}

// Numerically stable log-softmax of one row.
inline void log_softmax_row(std::span<const double> x, std::span<double> out) {
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lz;
}

}  // namespace bindllm::kernel
