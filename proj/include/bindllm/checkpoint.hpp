#pragma once

// Model bundle and its on-disk checkpoint.
//
// Layout (little endian):
//   "BNDK" | version u32 | config length u64 | config JSON |
//   section count u32 | sections: name (u32 length + bytes), ndim u32, dims u64[ndim], f64 data |
//   rng seed u64 | rng counter u64 |
//   provenance count u32 | entries (u32 length + bytes)
//
// The config JSON holds the model shapes, encoder spec, tokenizer merges,
// stage name and global step. An adapter-only checkpoint carries just the
// lora / bias_norm / gates sections and is applied on top of a full one.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/bind_network.hpp"
#include "bindllm/lm.hpp"

namespace bindllm {

struct ModelConfig {
  LMConfig lm;
  BindDims bind;
  EncoderSpec encoder;
  std::size_t lora_rank = 0;  // 0: no adapters attached
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"lm", to_json(c.lm)},
          {"bind", {{"joint", c.bind.joint}, {"model", c.bind.model}, {"hidden", c.bind.hidden}}},
          {"encoder",
           {{"seed", c.encoder.seed},
            {"raw_dim", c.encoder.raw_dim},
            {"embed_dim", c.encoder.embed_dim},
            {"offset_norm", c.encoder.offset_norm},
            {"noise_scale", c.encoder.noise_scale}}},
          {"lora_rank", c.lora_rank}};
}

inline EncoderSpec encoder_spec_from_json(const nlohmann::json& e) {
  return {.seed = e.at("seed").get<std::uint64_t>(),
          .raw_dim = e.at("raw_dim").get<std::size_t>(),
          .embed_dim = e.at("embed_dim").get<std::size_t>(),
          .offset_norm = e.at("offset_norm").get<double>(),
          .noise_scale = e.at("noise_scale").get<double>()};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.lm = lm_config_from_json(j.at("lm"));
  const auto& b = j.at("bind");
  c.bind = {b.at("joint").get<std::size_t>(), b.at("model").get<std::size_t>(), b.at("hidden").get<std::size_t>()};
  c.encoder = encoder_spec_from_json(j.at("encoder"));
  c.lora_rank = j.at("lora_rank").get<std::size_t>();
  return c;
}

class Model {
 public:
  Model() = default;

  static Model init(const ModelConfig& cfg, Tokenizer tokenizer, std::uint64_t seed) {
    if (cfg.bind.model != cfg.lm.dim) throw ConfigError("bind network width must equal the LM width");
    if (cfg.bind.joint != cfg.encoder.embed_dim) throw ConfigError("bind input width must equal the joint space width");
    if (tokenizer.vocab_size() != cfg.lm.vocab_size) throw ConfigError("tokenizer and LM vocabulary sizes differ");
    Model m;
    m.cfg_ = cfg;
    m.tokenizer_ = std::move(tokenizer);
    m.lm_ = InjectedLM::init(cfg.lm, CounterRng(seed).fork(1).next_u64());
    m.bind_ = BindNetwork::init(cfg.bind, CounterRng(seed).fork(2).next_u64());
    if (cfg.lora_rank) m.lm_.attach_lora(cfg.lora_rank, CounterRng(seed).fork(3).next_u64());
    return m;
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
  InjectedLM& lm() noexcept { return lm_; }
  const InjectedLM& lm() const noexcept { return lm_; }
  BindNetwork& bind() noexcept { return bind_; }

  void attach_lora(std::size_t rank, std::uint64_t seed) {
    if (cfg_.lora_rank) throw ConfigError("adapters are already attached");
    lm_.attach_lora(rank, seed);
    cfg_.lora_rank = rank;
  }

  SyntheticWorld world() const { return SyntheticWorld(cfg_.encoder); }

  std::vector<Parameter*> parameters() {
    auto ps = lm_.parameters();
    auto bp = bind_.parameters();
    ps.insert(ps.end(), bp.begin(), bp.end());
    return ps;
  }

 private:
  ModelConfig cfg_;
  Tokenizer tokenizer_;
  InjectedLM lm_;
  BindNetwork bind_;
};

struct Checkpoint {
  Model model;
  std::string stage;
  std::uint64_t step = 0;
  CounterRng rng;
  std::vector<std::string> provenance;  // ancestors first, this stage last
};

namespace ckpt_detail {

inline constexpr std::array<char, 4> kMagic = {'B', 'N', 'D', 'K'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte offset " +
                        std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto b = take(4, what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    return lo | std::uint64_t(u32(what)) << 32;
  }
  double f64(const char* what) {
    const std::uint64_t bits = u64(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    auto b = take(n, what);
    return {b.begin(), b.end()};
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline bool adapter_group(ParamGroup g) {
  return g == ParamGroup::lora || g == ParamGroup::bias_norm || g == ParamGroup::gates;
}

}  // namespace ckpt_detail

inline std::vector<std::uint8_t> serialize_checkpoint(Checkpoint& c, bool adapters_only = false) {
  using namespace ckpt_detail;
  Writer w;
  w.raw(kMagic.data(), 4);
  w.u32(kVersion);
  nlohmann::json cfg{{"model", to_json(c.model.config())},
                     {"tokenizer", c.model.tokenizer().to_json()},
                     {"stage", c.stage},
                     {"step", c.step},
                     {"adapters_only", adapters_only}};
  const std::string js = cfg.dump();
  w.u64(js.size());
  w.raw(js.data(), js.size());
  std::vector<Parameter*> params;
  for (Parameter* p : c.model.parameters())
    if (!adapters_only || adapter_group(p->group)) params.push_back(p);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (Parameter* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) w.u64(d);
    for (double v : p->value.storage()) w.f64(v);
  }
  w.u64(c.rng.seed());
  w.u64(c.rng.counter());
  w.u32(static_cast<std::uint32_t>(c.provenance.size()));
  for (const auto& s : c.provenance) w.str(s);
  return std::move(w.bytes);
}

namespace ckpt_detail {

struct Parsed {
  nlohmann::json config;
  std::map<std::string, Tensor> sections;
  std::vector<std::string> order;
  CounterRng rng;
  std::vector<std::string> provenance;
};

inline Parsed parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    throw FormatError("bad magic at byte offset 0: expected 'BNDK'");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  Parsed out;
  const std::uint64_t n = r.u64("config length");
  const std::size_t at = r.pos();
  auto js = r.take(n, "config");
  try {
    out.config = nlohmann::json::parse(js.begin(), js.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config JSON at byte offset " + std::to_string(at) + " is invalid: " + e.what());
  }
  const std::uint32_t count = r.u32("section count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    std::string name = r.str("section name");
    const std::uint32_t ndim = r.u32("section rank");
    if (ndim == 0 || ndim > 4) throw FormatError("section '" + name + "' has rank " + std::to_string(ndim) + " at byte offset " + std::to_string(start));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint64_t dim = r.u64("section dims");
      if (dim == 0 || dim > (std::uint64_t(1) << 32)) throw FormatError("section '" + name + "' has a bad dimension at byte offset " + std::to_string(r.pos() - 8));
      numel *= dim;
      shape.push_back(static_cast<std::size_t>(dim));
    }
    if (numel > (bytes.size() - r.pos()) / 8) r.take(numel * 8, "section data");
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (double& v : data) v = r.f64("section data");
    for (double v : data)
      if (!std::isfinite(v)) throw FormatError("section '" + name + "' holds non-finite values");
    Tensor t(shape, std::move(data));
    if (!out.sections.emplace(name, std::move(t)).second) throw FormatError("duplicate section '" + name + "'");
    out.order.push_back(name);
  }
  const std::uint64_t seed = r.u64("rng seed");
  const std::uint64_t counter = r.u64("rng counter");
  out.rng = CounterRng(seed, counter);
  const std::uint32_t np = r.u32("provenance count");
  for (std::uint32_t i = 0; i < np; ++i) out.provenance.push_back(r.str("provenance entry"));
  if (!r.done()) throw FormatError("trailing bytes at byte offset " + std::to_string(r.pos()));
  return out;
}

inline void fill_parameters(Model& m, const Parsed& p, bool require_all) {
  std::size_t used = 0;
  for (Parameter* param : m.parameters()) {
    auto it = p.sections.find(param->name);
    if (it == p.sections.end()) {
      if (require_all) throw FormatError("checkpoint lacks parameter section '" + param->name + "'");
      continue;
    }
    if (it->second.shape() != param->value.shape()) {
      throw FormatError("section '" + param->name + "' has shape " + shape_str(it->second.shape()) + ", model expects " +
                        shape_str(param->value.shape()));
    }
    param->value = it->second;
    param->grad = Tensor(param->value.shape());
    ++used;
  }
  if (used != p.sections.size()) throw FormatError("checkpoint holds sections the model does not have");
}

}  // namespace ckpt_detail

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  auto p = ckpt_detail::parse(bytes);
  Checkpoint c;
  try {
    if (p.config.at("adapters_only").get<bool>()) throw FormatError("adapter-only file; apply it to a full checkpoint");
    const ModelConfig mc = model_config_from_json(p.config.at("model"));
    c.model = Model::init(mc, Tokenizer::from_json(p.config.at("tokenizer")), 0);
    c.stage = p.config.at("stage").get<std::string>();
    c.step = p.config.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  ckpt_detail::fill_parameters(c.model, p, true);
  c.rng = p.rng;
  c.provenance = std::move(p.provenance);
  return c;
}

// Overlays an adapter-only file onto `c` (shapes and adapter rank must agree).
inline void apply_adapters(Checkpoint& c, std::span<const std::uint8_t> bytes) {
  auto p = ckpt_detail::parse(bytes);
  if (!p.config.value("adapters_only", false)) throw FormatError("not an adapter-only checkpoint");
  const ModelConfig mc = model_config_from_json(p.config.at("model"));
  if (to_json(mc) != to_json(c.model.config())) throw FormatError("adapter file was made for a different model configuration");
  ckpt_detail::fill_parameters(c.model, p, false);
  c.stage = p.config.at("stage").get<std::string>();
  c.step = p.config.at("step").get<std::uint64_t>();
  c.provenance = std::move(p.provenance);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write to " + path + " failed");
}

inline void save_checkpoint(Checkpoint& c, const std::string& path, bool adapters_only = false) {
  write_file_bytes(path, serialize_checkpoint(c, adapters_only));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto bytes = read_file_bytes(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// 64-bit FNV-1a, used to compare artifacts by checksum.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace bindllm
