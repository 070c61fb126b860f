#pragma once

// Deterministic stand-ins for frozen multi-modal encoders that share one
// embedding space.
//
// Every modality observes a shared latent z through its own orthogonal
// "sensor" Q_m (raw = z Q_m + noise). The encoder for m holds
// base_projection = Q_m^T E, with E a shared latent->embedding map, and a
// small per-modality offset. Paired samples therefore land close together
// while each modality keeps a consistent offset from the others: a
// controllable modality gap.

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/error.hpp"
#include "bindllm/kernels.hpp"
#include "bindllm/rng.hpp"
#include "bindllm/tensor.hpp"

namespace bindllm {

enum class Modality { image, text, audio, video, point_cloud, mixed };

inline constexpr std::array<Modality, 5> kEncodableModalities = {
    Modality::image, Modality::text, Modality::audio, Modality::video, Modality::point_cloud};

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::text: return "text";
    case Modality::audio: return "audio";
    case Modality::video: return "video";
    case Modality::point_cloud: return "point_cloud";
    case Modality::mixed: return "mixed";
  }
  return "?";
}

// "mixed" is produced by mix() and is never accepted as an input modality.
inline std::optional<Modality> parse_modality(std::string_view s) {
  for (Modality m : kEncodableModalities)
    if (modality_name(m) == s) return m;
  return std::nullopt;
}

class JointEmbedding {
 public:
  // Normalizes `vec` to unit L2 norm; a zero vector is rejected.
  static JointEmbedding normalized(Tensor vec, Modality m, std::string source_id) {
    if (vec.rank() != 2 || vec.rows() != 1) {
      throw DimensionError("joint embedding must be a row vector, got " + shape_str(vec.shape()));
    }
    const double n = l2_norm(vec.data());
    if (n == 0.0) throw DegenerateMixError("cannot normalize a zero embedding (" + source_id + ")");
    for (double& v : vec.storage()) v /= n;
    return JointEmbedding(std::move(vec), m, std::move(source_id));
  }

  // The fake all-zero input used for language-only records. The only
  // embedding allowed to have norm 0.
  static JointEmbedding placeholder(std::size_t dim) {
    return JointEmbedding(Tensor::zeros(1, dim), Modality::image, "<placeholder>");
  }

  const Tensor& vector() const noexcept { return vec_; }
  Modality modality() const noexcept { return modality_; }
  const std::string& source_id() const noexcept { return source_id_; }
  std::size_t dim() const noexcept { return vec_.size(); }
  bool is_placeholder() const noexcept { return source_id_ == "<placeholder>"; }

 private:
  JointEmbedding(Tensor v, Modality m, std::string id)
      : vec_(std::move(v)), modality_(m), source_id_(std::move(id)) {}

  Tensor vec_;
  Modality modality_;
  std::string source_id_;
};

inline JointEmbedding placeholder_embedding(std::size_t dim) { return JointEmbedding::placeholder(dim); }

struct EncoderSpec {
  std::uint64_t seed = 0;
  std::size_t raw_dim = 32;
  std::size_t embed_dim = 64;
  double offset_norm = 0.25;
  double noise_scale = 0.01;
};

class SyntheticEncoder {
 public:
  SyntheticEncoder(Modality m, Tensor base_projection, Tensor modality_offset, double noise_scale)
      : modality_(m),
        projection_(std::move(base_projection)),
        offset_(std::move(modality_offset)),
        noise_scale_(noise_scale) {}

  Modality modality() const noexcept { return modality_; }
  std::size_t raw_dim() const { return projection_.rows(); }
  std::size_t embed_dim() const { return projection_.cols(); }
  const Tensor& base_projection() const noexcept { return projection_; }
  const Tensor& modality_offset() const noexcept { return offset_; }
  double noise_scale() const noexcept { return noise_scale_; }

  JointEmbedding encode(std::span<const double> raw, std::string source_id = {}) const {
    if (raw.size() != raw_dim()) {
      throw DimensionError("encode(" + std::string(modality_name(modality_)) + "): raw length " +
                           std::to_string(raw.size()) + ", encoder expects " +
                           std::to_string(raw_dim()));
    }
    Tensor x(Shape{1, raw.size()}, std::vector<double>(raw.begin(), raw.end()));
    Tensor e = kernel::matmul(x, projection_);
    e += offset_;
    return JointEmbedding::normalized(std::move(e), modality_, std::move(source_id));
  }

 private:
  Modality modality_;
  Tensor projection_;
  Tensor offset_;
  double noise_scale_;
};

// Orthogonal matrix from Gram-Schmidt on a seeded Gaussian.
inline Tensor random_orthogonal(std::size_t n, CounterRng& rng) {
  Tensor q = Tensor::normal(n, n, 1.0, rng);
  for (std::size_t i = 0; i < n; ++i) {
    auto qi = q.row_span(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto qj = q.row_span(j);
      const double d = dot(qi, qj);
      for (std::size_t c = 0; c < n; ++c) qi[c] -= d * qj[c];
    }
    const double nrm = l2_norm(qi);
    for (double& v : qi) v /= nrm;
  }
  return q;
}

// The full encoder family plus the sensor transforms the synthetic data
// generator needs to produce paired raw inputs.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(const EncoderSpec& spec) : spec_(spec) {
    CounterRng root(spec.seed);
    CounterRng shared = root.fork(1000);
    if (spec.raw_dim == 0 || spec.raw_dim > spec.embed_dim) {
      throw ConfigError("synthetic world needs 0 < raw_dim <= embed_dim");
    }
    // Orthonormal rows: |z E| == |z|, so every latent lands at the same
    // distance from the modality offsets.
    const Tensor square = random_orthogonal(spec.embed_dim, shared);
    Tensor latent_map = Tensor::zeros(spec.raw_dim, spec.embed_dim);
    for (std::size_t i = 0; i < spec.raw_dim; ++i)
      for (std::size_t j = 0; j < spec.embed_dim; ++j) latent_map(i, j) = square(i, j);
    for (Modality m : kEncodableModalities) {
      CounterRng r = root.fork(static_cast<std::uint64_t>(m) + 1);
      Tensor sensor = random_orthogonal(spec.raw_dim, r);
      // base_projection = sensor^T * latent_map
      Tensor proj = Tensor::zeros(spec.raw_dim, spec.embed_dim);
      Tensor sensor_t = Tensor::zeros(spec.raw_dim, spec.raw_dim);
      for (std::size_t i = 0; i < spec.raw_dim; ++i)
        for (std::size_t j = 0; j < spec.raw_dim; ++j) sensor_t(i, j) = sensor(j, i);
      kernel::matmul_acc(sensor_t, latent_map, proj);
      Tensor offset = Tensor::normal(1, spec.embed_dim, 1.0, r);
      const double n = l2_norm(offset.data());
      for (double& v : offset.storage()) v *= spec.offset_norm / n;
      sensors_.push_back(std::move(sensor));
      encoders_.emplace_back(m, std::move(proj), std::move(offset), spec.noise_scale);
    }
  }

  const EncoderSpec& spec() const noexcept { return spec_; }

  const SyntheticEncoder& encoder(Modality m) const {
    if (m == Modality::mixed) throw ConfigError("no encoder exists for the mixed modality");
    return encoders_[static_cast<std::size_t>(m)];
  }

  // Raw observation of latent `z` (unit row vector of length raw_dim) by modality m.
  std::vector<double> observe(Modality m, std::span<const double> z, CounterRng& noise) const {
    if (z.size() != spec_.raw_dim) throw DimensionError("observe: latent length mismatch");
    const Tensor& s = sensors_[static_cast<std::size_t>(m)];
    std::vector<double> raw(spec_.raw_dim, 0.0);
    for (std::size_t i = 0; i < spec_.raw_dim; ++i) {
      if (z[i] == 0.0) continue;
      for (std::size_t j = 0; j < spec_.raw_dim; ++j) raw[j] += z[i] * s(i, j);
    }
    for (double& v : raw) v += spec_.noise_scale * noise.normal();
    return raw;
  }

  JointEmbedding encode(Modality m, std::span<const double> raw, std::string source_id = {}) const {
    return encoder(m).encode(raw, std::move(source_id));
  }

 private:
  EncoderSpec spec_;
  std::vector<Tensor> sensors_;
  std::vector<SyntheticEncoder> encoders_;
};

// Renormalized coefficient-weighted combination of embeddings.
inline JointEmbedding mix(std::span<const JointEmbedding> embeddings,
                          std::span<const double> coefficients) {
  if (embeddings.empty() || embeddings.size() != coefficients.size()) {
    throw DimensionError("mix: need equal, nonzero numbers of embeddings and coefficients (got " +
                         std::to_string(embeddings.size()) + " and " +
                         std::to_string(coefficients.size()) + ")");
  }
  const std::size_t dim = embeddings.front().dim();
  Tensor acc = Tensor::zeros(1, dim);
  std::string id;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (!std::isfinite(coefficients[i])) throw NumericError("mix: non-finite coefficient");
    if (embeddings[i].dim() != dim) throw DimensionError("mix: embedding dimensions differ");
    const Tensor& v = embeddings[i].vector();
    for (std::size_t j = 0; j < dim; ++j) acc[j] += coefficients[i] * v[j];
    id += (i ? "+" : "") + embeddings[i].source_id();
  }
  if (l2_norm(acc.data()) == 0.0) {
    throw DegenerateMixError("mix: weighted sum is the zero vector (inputs cancel)");
  }
  return JointEmbedding::normalized(std::move(acc), Modality::mixed, std::move(id));
}

struct RawSample {
  std::string source_id;
  Modality modality = Modality::image;
  std::vector<double> raw;
};

inline nlohmann::json to_json(const RawSample& s) {
  return {{"source_id", s.source_id}, {"modality", modality_name(s.modality)}, {"raw", s.raw}};
}

inline RawSample raw_sample_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw IngestError("raw sample is not a JSON object");
  for (const char* key : {"source_id", "modality", "raw"})
    if (!j.contains(key)) throw IngestError(std::string("raw sample missing \"") + key + "\"");
  RawSample s;
  if (!j["source_id"].is_string()) throw IngestError("\"source_id\" must be a string");
  s.source_id = j["source_id"].get<std::string>();
  if (!j["modality"].is_string()) throw IngestError("\"modality\" must be a string");
  auto m = parse_modality(j["modality"].get<std::string>());
  if (!m) throw IngestError("unknown modality \"" + j["modality"].get<std::string>() + "\"");
  s.modality = *m;
  if (!j["raw"].is_array() || j["raw"].empty()) throw IngestError("\"raw\" must be a nonempty array");
  for (const auto& v : j["raw"]) {
    if (!v.is_number()) throw IngestError("\"raw\" holds a non-number");
    s.raw.push_back(v.get<double>());
  }
  return s;
}

inline std::vector<RawSample> read_raw_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path);
  std::vector<RawSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(raw_sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(path + ": line " + std::to_string(lineno) + ": " + e.what());
    } catch (const IngestError& e) {
      throw IngestError(path + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace bindllm
