#pragma once

// Training-free cache of joint-space embeddings.
//
// Retrieval scores are inner products between a unit-norm query and unit-norm
// keys (= cosine similarity). enhance() blends the similarity-weighted
// aggregate of the retrieved values back into the query:
//
//   F_e = alpha * sum_i w_i V_i + (1 - alpha) * F_M
//
// By default w is the top-k similarities clamped at zero and divided by
// their sum (a convex combination). With raw_eq4 the raw similarities are
// used unnormalized.
//
// File layout (little endian):
//   "BNDC" | version u32 | dim u32 | count u64 | flags u8 |
//   keys f32[count*dim] | values f32[count*dim] (absent when flags bit 0) |
//   count x (u32 length, UTF-8 bytes) ids

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bindllm/encoders.hpp"
#include "bindllm/rng.hpp"

namespace bindllm {

struct RetrievalResult {
  std::vector<std::size_t> indices;
  std::vector<double> similarities;  // descending
  std::optional<Tensor> enhanced;
};

struct EnhanceOptions {
  std::size_t k = 16;
  double alpha = 0.5;
  bool raw_eq4 = false;
};

class CacheStore;

// Inverted-list index: spherical k-means partitions the keys; a query scans
// the lists of its `nprobe` nearest centroids.
class PartitionedIndex {
 public:
  static PartitionedIndex build(const CacheStore& store, std::size_t nlist, std::uint64_t seed,
                                std::size_t iterations = 8);

  std::size_t nlist() const noexcept { return centroids_.size() / std::max<std::size_t>(dim_, 1); }
  std::size_t nprobe() const noexcept { return nprobe_; }
  void set_nprobe(std::size_t n) { nprobe_ = std::clamp<std::size_t>(n, 1, nlist()); }
  const std::vector<std::vector<std::size_t>>& lists() const noexcept { return lists_; }

  RetrievalResult search(const CacheStore& store, std::span<const double> query, std::size_t k) const;

  // Smallest nprobe whose measured recall@k on seeded probe queries reaches
  // `target` (mirrors automatic index tuning). Returns the recall achieved.
  double tune(const CacheStore& store, std::size_t k, double target, std::uint64_t seed,
              std::size_t probes = 64);

 private:
  std::size_t dim_ = 0;
  std::vector<double> centroids_;
  std::vector<std::vector<std::size_t>> lists_;
  std::size_t nprobe_ = 1;
};

class CacheStore {
 public:
  static constexpr std::array<char, 4> kMagic = {'B', 'N', 'D', 'C'};
  static constexpr std::uint32_t kVersion = 1;
  static constexpr double kUnitTolerance = 1e-6;

  CacheStore() = default;
  explicit CacheStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<float>& keys() const noexcept { return keys_; }
  const std::vector<float>& values() const noexcept { return values_.empty() ? keys_ : values_; }
  bool values_are_keys() const noexcept { return values_.empty(); }

  std::span<const float> key(std::size_t i) const { return {keys_.data() + i * dim_, dim_}; }
  std::span<const float> value(std::size_t i) const { return {values().data() + i * dim_, dim_}; }

  // Appends a key/value row (values == keys). Rejects dimension changes and
  // non-unit rows, naming the offending id.
  void add(const JointEmbedding& e) { add(e.vector().data(), e.source_id()); }

  void add(std::span<const double> v, const std::string& id) {
    if (dim_ == 0 && ids_.empty()) dim_ = v.size();
    if (v.size() != dim_) {
      throw DimensionError("cache build: embedding '" + id + "' has dimension " +
                           std::to_string(v.size()) + ", store holds " + std::to_string(dim_));
    }
    const double n = l2_norm(v);
    if (std::abs(n - 1.0) > kUnitTolerance) {
      throw RangeError("cache build: embedding '" + id + "' is not unit norm (|v| = " +
                       std::to_string(n) + ")");
    }
    // Rows are stored as f32. The rounded row is nudged toward the origin
    // until its norm is at most 1, so convex blends of values never leave
    // the unit ball.
    std::vector<float> row(dim_);
    double shrink = 1.0;
    for (;;) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        row[j] = static_cast<float>(v[j] / n * shrink);
        n2 += double(row[j]) * double(row[j]);
      }
      if (n2 <= 1.0) break;
      shrink -= 0x1p-24;
    }
    keys_.insert(keys_.end(), row.begin(), row.end());
    if (!values_.empty()) values_.insert(values_.end(), row.begin(), row.end());
    inv_norms_.push_back(1.0 / row_norm(row));
    ids_.push_back(id);
  }

  // Cosine between stored key i and the query. Dividing by the stored row
  // norm removes the f32 rounding of the key from the score, so a query equal
  // to the embedding that produced key i scores 1 to double precision.
  double similarity(std::size_t i, std::span<const double> query, double inv_query_norm) const {
    const float* k = keys_.data() + i * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) s += static_cast<double>(k[j]) * query[j];
    return s * inv_norms_[i] * inv_query_norm;
  }

  static double row_norm(std::span<const float> r) {
    double n2 = 0.0;
    for (float f : r) n2 += double(f) * double(f);
    return std::sqrt(n2);
  }

  void check_query(std::span<const double> query, std::size_t k) const {
    if (empty()) throw EmptyCacheError("cache is empty");
    if (k == 0 || k > size()) {
      throw RangeError("k = " + std::to_string(k) + " outside [1, " + std::to_string(size()) +
                       "] for a cache of " + std::to_string(size()) + " entries");
    }
    if (query.size() != dim_) {
      throw DimensionError("query dimension " + std::to_string(query.size()) + " vs cache dimension " +
                           std::to_string(dim_));
    }
    const double n = l2_norm(query);
    if (std::abs(n - 1.0) > kUnitTolerance) {
      throw RangeError("query is not unit norm (|q| = " + std::to_string(n) + ")");
    }
  }

  // Exact top-k by inner product; ties go to the lower insertion index.
  RetrievalResult topk(std::span<const double> query, std::size_t k) const {
    check_query(query, k);
    std::vector<double> sims(size());
    const double iq = 1.0 / l2_norm(query);
    for (std::size_t i = 0; i < size(); ++i) sims[i] = similarity(i, query, iq);
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    return select_topk(sims, idx, k);
  }

  static RetrievalResult select_topk(const std::vector<double>& sims, std::vector<std::size_t> idx,
                                     std::size_t k) {
    auto better = [&](std::size_t a, std::size_t b) {
      return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
    };
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    RetrievalResult r;
    r.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i : r.indices) r.similarities.push_back(sims[i]);
    return r;
  }

  RetrievalResult topk(const JointEmbedding& q, std::size_t k) const { return topk(q.vector().data(), k); }

  Tensor blend(const RetrievalResult& r, std::span<const double> query, const EnhanceOptions& opt) const {
    if (!(opt.alpha >= 0.0 && opt.alpha <= 1.0)) {
      throw RangeError("alpha = " + std::to_string(opt.alpha) + " outside [0, 1]");
    }
    const std::size_t k = r.indices.size();
    std::vector<double> w(k);
    if (opt.raw_eq4) {
      w = r.similarities;
    } else {
      double total = 0.0;
      for (std::size_t i = 0; i < k; ++i) total += (w[i] = std::max(0.0, r.similarities[i]));
      if (total > 0.0) {
        for (double& x : w) x /= total;
      } else {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(k));
      }
    }
    std::vector<double> agg(dim_, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      auto v = value(r.indices[i]);
      for (std::size_t j = 0; j < dim_; ++j) agg[j] += w[i] * static_cast<double>(v[j]);
    }
    Tensor out = Tensor::zeros(1, dim_);
    for (std::size_t j = 0; j < dim_; ++j) out[j] = opt.alpha * agg[j] + (1.0 - opt.alpha) * query[j];
    return out;
  }

  RetrievalResult enhance(std::span<const double> query, const EnhanceOptions& opt,
                          const PartitionedIndex* index = nullptr) const {
    RetrievalResult r = index ? index->search(*this, query, opt.k) : topk(query, opt.k);
    r.enhanced = blend(r, query, opt);
    return r;
  }

  Tensor enhance(const JointEmbedding& q, const EnhanceOptions& opt) const {
    return *enhance(q.vector().data(), opt).enhanced;
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(dim_));
    put_u64(out, size());
    const bool elide = values_are_keys() || values_ == keys_;
    out.push_back(elide ? 1 : 0);
    for (float f : keys_) put_f32(out, f);
    if (!elide)
      for (float f : values_) put_f32(out, f);
    for (const auto& id : ids_) {
      put_u32(out, static_cast<std::uint32_t>(id.size()));
      out.insert(out.end(), id.begin(), id.end());
    }
    return out;
  }

  static CacheStore deserialize(std::span<const std::uint8_t> bytes,
                                std::optional<std::size_t> expected_dim = std::nullopt) {
    Reader rd{bytes, 0};
    auto magic = rd.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
      throw FormatError("bad magic at byte offset 0: expected 'BNDC'");
    }
    const std::uint32_t version = rd.u32("version");
    if (version != kVersion) {
      throw FormatError("unsupported cache version " + std::to_string(version) + " at byte offset 4");
    }
    const std::uint32_t dim = rd.u32("dim");
    const std::uint64_t count = rd.u64("count");
    const std::uint8_t flags = rd.take(1, "flags")[0];
    if (flags > 1) throw FormatError("unknown flag bits at byte offset 20");
    if (count > 0 && dim == 0) throw FormatError("zero dimension with nonzero count at byte offset 8");
    if (expected_dim && count > 0 && dim != *expected_dim) {
      throw FormatError("cache dimension " + std::to_string(dim) + " (byte offset 8) does not match expected " +
                        std::to_string(*expected_dim));
    }
    const std::uint64_t cells = count * dim;
    if (dim != 0 && cells / dim != count) throw FormatError("row count overflows at byte offset 12");
    CacheStore s(dim);
    s.keys_ = rd.f32s(cells, "keys");
    if (!(flags & 1)) s.values_ = rd.f32s(cells, "values");
    for (std::uint64_t i = 0; i < count; ++i) {
      const std::uint32_t n = rd.u32("id length");
      auto b = rd.take(n, "id bytes");
      s.ids_.emplace_back(b.begin(), b.end());
    }
    if (rd.pos != bytes.size()) {
      throw FormatError("trailing bytes after id table at byte offset " + std::to_string(rd.pos));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double n = row_norm(s.key(i));
      if (!std::isfinite(n) || std::abs(n - 1.0) > kUnitTolerance) {
        throw FormatError("key row " + std::to_string(i) + " is not unit norm");
      }
      s.inv_norms_.push_back(1.0 / n);
    }
    return s;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write to " + path + " failed");
  }

  static CacheStore load(const std::string& path, std::optional<std::size_t> expected_dim = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
      return deserialize(bytes, expected_dim);
    } catch (const FormatError& e) {
      throw FormatError(path + ": " + e.what());
    }
  }

  friend bool operator==(const CacheStore& a, const CacheStore& b) {
    return a.dim_ == b.dim_ && a.keys_ == b.keys_ && a.values() == b.values() && a.ids_ == b.ids_;
  }

 private:
  struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos;

    std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
      if (n > bytes.size() - pos) {
        throw FormatError(std::string("truncated while reading ") + what + " at byte offset " +
                          std::to_string(pos) + " (need " + std::to_string(n) + " bytes, " +
                          std::to_string(bytes.size() - pos) + " left)");
      }
      auto s = bytes.subspan(pos, static_cast<std::size_t>(n));
      pos += static_cast<std::size_t>(n);
      return s;
    }
    std::uint32_t u32(const char* what) {
      auto b = take(4, what);
      return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
             std::uint32_t(b[3]) << 24;
    }
    std::uint64_t u64(const char* what) {
      const std::uint64_t lo = u32(what);
      const std::uint64_t hi = u32(what);
      return lo | hi << 32;
    }
    std::vector<float> f32s(std::uint64_t n, const char* what) {
      if (n > (bytes.size() - pos) / 4) take(n * 4, what);
      std::vector<float> out(static_cast<std::size_t>(n));
      for (auto& f : out) {
        const std::uint32_t bits = u32(what);
        std::memcpy(&f, &bits, 4);
      }
      return out;
    }
  };

  static void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  static void put_u64(std::vector<std::uint8_t>& o, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  static void put_f32(std::vector<std::uint8_t>& o, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(o, bits);
  }

  std::size_t dim_ = 0;
  std::vector<float> keys_;
  std::vector<float> values_;  // empty: values are the keys
  std::vector<std::string> ids_;
  std::vector<double> inv_norms_;
};

template <typename Range>
CacheStore cache_build(const Range& embeddings) {
  CacheStore s;
  for (const JointEmbedding& e : embeddings) s.add(e);
  return s;
}

inline PartitionedIndex PartitionedIndex::build(const CacheStore& store, std::size_t nlist,
                                                std::uint64_t seed, std::size_t iterations) {
  if (store.empty()) throw EmptyCacheError("cannot index an empty cache");
  PartitionedIndex ix;
  ix.dim_ = store.dim();
  const std::size_t m = store.size(), d = store.dim();
  nlist = std::clamp<std::size_t>(nlist, 1, m);
  CounterRng rng(seed);
  // Seed centroids with distinct keys picked by a partial Fisher-Yates shuffle.
  std::vector<std::size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 0; i < nlist; ++i) std::swap(perm[i], perm[i + rng.below(m - i)]);
  ix.centroids_.assign(nlist * d, 0.0);
  for (std::size_t c = 0; c < nlist; ++c) {
    auto k = store.key(perm[c]);
    for (std::size_t j = 0; j < d; ++j) ix.centroids_[c * d + j] = k[j];
  }
  std::vector<std::size_t> assign(m, 0);
  for (std::size_t it = 0; it <= iterations; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      auto k = store.key(i);
      double best = -INFINITY;
      for (std::size_t c = 0; c < nlist; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += ix.centroids_[c * d + j] * k[j];
        if (s > best) {
          best = s;
          assign[i] = c;
        }
      }
    }
    if (it == iterations) break;
    std::vector<double> sum(nlist * d, 0.0);
    std::vector<std::size_t> count(nlist, 0);
    for (std::size_t i = 0; i < m; ++i) {
      auto k = store.key(i);
      ++count[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sum[assign[i] * d + j] += k[j];
    }
    for (std::size_t c = 0; c < nlist; ++c) {
      if (count[c] == 0) continue;
      double n = 0.0;
      for (std::size_t j = 0; j < d; ++j) n += sum[c * d + j] * sum[c * d + j];
      n = std::sqrt(n);
      if (n == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) ix.centroids_[c * d + j] = sum[c * d + j] / n;
    }
  }
  ix.lists_.assign(nlist, {});
  for (std::size_t i = 0; i < m; ++i) ix.lists_[assign[i]].push_back(i);
  ix.nprobe_ = std::max<std::size_t>(1, nlist / 8);
  return ix;
}

inline RetrievalResult PartitionedIndex::search(const CacheStore& store, std::span<const double> query,
                                                std::size_t k) const {
  store.check_query(query, k);
  const std::size_t d = dim_, nl = nlist();
  std::vector<double> csim(nl);
  for (std::size_t c = 0; c < nl; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += centroids_[c * d + j] * query[j];
    csim[c] = s;
  }
  std::vector<std::size_t> order(nl);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t probe = std::min(nprobe_, nl);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(probe), order.end(),
                    [&](std::size_t a, std::size_t b) { return csim[a] > csim[b] || (csim[a] == csim[b] && a < b); });
  std::vector<std::size_t> cand;
  for (std::size_t p = 0; p < probe; ++p) cand.insert(cand.end(), lists_[order[p]].begin(), lists_[order[p]].end());
  // Too few candidates: widen to further lists so k results always exist.
  for (std::size_t p = probe; cand.size() < k && p < nl; ++p)
    cand.insert(cand.end(), lists_[order[p]].begin(), lists_[order[p]].end());
  std::vector<double> sims(store.size(), 0.0);
  const double iq = 1.0 / l2_norm(query);
  for (std::size_t i : cand) sims[i] = store.similarity(i, query, iq);
  return CacheStore::select_topk(sims, std::move(cand), k);
}

inline double recall_at_k(const RetrievalResult& approx, const RetrievalResult& exact) {
  std::size_t hit = 0;
  for (std::size_t i : approx.indices)
    if (std::find(exact.indices.begin(), exact.indices.end(), i) != exact.indices.end()) ++hit;
  return exact.indices.empty() ? 1.0 : static_cast<double>(hit) / static_cast<double>(exact.indices.size());
}

inline double PartitionedIndex::tune(const CacheStore& store, std::size_t k, double target,
                                     std::uint64_t seed, std::size_t probes) {
  k = std::min(k, store.size());
  CounterRng rng(seed);
  // Half the probe queries are random directions, half are jittered keys.
  std::vector<std::vector<double>> queries;
  for (std::size_t q = 0; q < probes; ++q) {
    std::vector<double> v(dim_);
    if (q % 2 == 0) {
      for (double& x : v) x = rng.normal();
    } else {
      auto key = store.key(rng.below(store.size()));
      for (std::size_t j = 0; j < dim_; ++j) v[j] = key[j] + 0.3 * rng.normal() / std::sqrt(double(dim_));
    }
    const double n = l2_norm(v);
    for (double& x : v) x /= n;
    queries.push_back(std::move(v));
  }
  std::vector<RetrievalResult> exact;
  for (const auto& q : queries) exact.push_back(store.topk(q, k));
  double recall = 0.0;
  for (std::size_t np = 1; np <= nlist(); ++np) {
    nprobe_ = np;
    recall = 0.0;
    for (std::size_t q = 0; q < queries.size(); ++q) recall += recall_at_k(search(store, queries[q], k), exact[q]);
    recall /= static_cast<double>(queries.size());
    if (recall >= target) break;
  }
  return recall;
}

}  // namespace bindllm
