#pragma once

// Training records, JSONL ingestion, prompt templates and the synthetic
// attribute-world corpus generator.
//
// Caption line:      {"source_id", "modality", "raw": [...], "caption"}
// Instruction line:  {"instruction", "response"} plus, for visual records,
//                    {"source_id", "modality", "raw"} (all three or none)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/encoders.hpp"
#include "bindllm/tokenizer.hpp"

namespace bindllm {

// ---- prompt templates ----

inline constexpr std::string_view kYesNoSuffix = " Please answer yes or no.";
inline constexpr std::string_view kCaptionInstruction = "Describe this.";

inline std::string format_prompt(std::string_view instruction) {
  return "Instruction: " + std::string(instruction) + "\nResponse:";
}

inline std::string yesno_instruction(std::string_view question) {
  std::string q(question);
  if (!q.ends_with(kYesNoSuffix)) q += kYesNoSuffix;
  return q;
}

// Responses follow the prompt after one space.
inline std::string format_response(std::string_view response) { return " " + std::string(response); }

// ---- records ----

struct CaptionRecord {
  std::string source_id;
  Modality modality = Modality::image;
  std::vector<double> raw;
  std::string caption;
};

struct InstructionRecord {
  std::string instruction;
  std::string response;
  std::optional<std::string> source_id;  // absent: language-only
  std::optional<Modality> modality;
  std::vector<double> raw;

  bool language_only() const noexcept { return !source_id.has_value(); }
};

inline nlohmann::json to_json(const CaptionRecord& r) {
  return {{"source_id", r.source_id}, {"modality", modality_name(r.modality)}, {"raw", r.raw}, {"caption", r.caption}};
}

inline nlohmann::json to_json(const InstructionRecord& r) {
  nlohmann::json j{{"instruction", r.instruction}, {"response", r.response}};
  if (r.source_id) {
    j["source_id"] = *r.source_id;
    j["modality"] = modality_name(*r.modality);
    j["raw"] = r.raw;
  }
  return j;
}

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw IngestError(std::string("missing \"") + key + "\"");
  if (!j[key].is_string()) throw IngestError(std::string("\"") + key + "\" must be a string");
  return j[key].get<std::string>();
}

inline Modality require_modality(const nlohmann::json& j) {
  const std::string name = require_string(j, "modality");
  auto m = parse_modality(name);
  if (!m) throw IngestError("unknown modality \"" + name + "\"");
  return *m;
}

inline std::vector<double> require_raw(const nlohmann::json& j) {
  if (!j.contains("raw")) throw IngestError("missing \"raw\"");
  if (!j["raw"].is_array() || j["raw"].empty()) throw IngestError("\"raw\" must be a nonempty array");
  std::vector<double> raw;
  for (const auto& v : j["raw"]) {
    if (!v.is_number()) throw IngestError("\"raw\" entries must be numbers");
    raw.push_back(v.get<double>());
  }
  return raw;
}

}  // namespace detail

inline CaptionRecord caption_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw IngestError("line is not a JSON object");
  CaptionRecord r;
  r.source_id = detail::require_string(j, "source_id");
  r.modality = detail::require_modality(j);
  r.raw = detail::require_raw(j);
  r.caption = detail::require_string(j, "caption");
  if (r.caption.empty()) throw IngestError("\"caption\" is empty");
  return r;
}

inline InstructionRecord instruction_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw IngestError("line is not a JSON object");
  InstructionRecord r;
  r.instruction = detail::require_string(j, "instruction");
  r.response = detail::require_string(j, "response");
  if (r.response.empty()) throw IngestError("\"response\" is empty");
  const int visual = int(j.contains("source_id")) + int(j.contains("modality")) + int(j.contains("raw"));
  if (visual != 0 && visual != 3) throw IngestError("visual records need all of source_id, modality and raw");
  if (visual == 3) {
    r.source_id = detail::require_string(j, "source_id");
    r.modality = detail::require_modality(j);
    r.raw = detail::require_raw(j);
  }
  return r;
}

template <typename Record>
struct Ingested {
  std::vector<Record> records;
  std::vector<std::string> warnings;
};

inline constexpr std::size_t kMaxReportedOffenders = 20;

namespace detail {

template <typename Record, typename Parse>
Ingested<Record> ingest_lines(const std::string& path, Parse parse, bool unique_ids) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path);
  Ingested<Record> out;
  std::vector<std::string> offenders;
  std::size_t bad = 0;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Record r = parse(nlohmann::json::parse(line));
      if constexpr (requires { r.caption; }) {
        if (unique_ids && !seen.insert(r.source_id).second) {
          throw IngestError("duplicate source_id \"" + r.source_id + "\"");
        }
      }
      out.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      ++bad;
      if (offenders.size() < kMaxReportedOffenders) offenders.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (bad) {
    std::string msg = path + ": " + std::to_string(bad) + " malformed line(s)";
    for (const auto& o : offenders) msg += "\n  " + o;
    if (bad > offenders.size()) msg += "\n  ... and " + std::to_string(bad - offenders.size()) + " more";
    throw IngestError(msg);
  }
  if (out.records.empty()) out.warnings.push_back(path + ": no records");
  return out;
}

}  // namespace detail

inline Ingested<CaptionRecord> ingest_captions(const std::string& path) {
  return detail::ingest_lines<CaptionRecord>(path, caption_from_json, true);
}

inline Ingested<InstructionRecord> ingest_instructions(const std::string& path) {
  return detail::ingest_lines<InstructionRecord>(path, instruction_from_json, false);
}

template <typename Record>
void write_jsonl(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IngestError("cannot open " + path + " for writing");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw IngestError("write to " + path + " failed");
}

// ---- synthetic attribute world ----

struct AttributeSet {
  static constexpr std::array<std::string_view, 4> colors = {"red", "green", "blue", "yellow"};
  static constexpr std::array<std::string_view, 4> shapes = {"circle", "square", "triangle", "star"};
  static constexpr std::array<std::string_view, 4> actions = {"jumps", "spins", "rolls", "glows"};
  static constexpr std::array<std::string_view, 4> verbs = {"jump", "spin", "roll", "glow"};
};

struct Attributes {
  std::size_t color = 0, shape = 0, action = 0;

  std::size_t index() const { return (color * 4 + shape) * 4 + action; }
  static Attributes from_index(std::size_t i) { return {i / 16, (i / 4) % 4, i % 4}; }

  std::string caption() const {
    return "a " + std::string(AttributeSet::colors[color]) + " " + std::string(AttributeSet::shapes[shape]) +
           " that " + std::string(AttributeSet::actions[action]);
  }
};

inline constexpr std::size_t kAttributeCombos = 64;

// A yes/no question about one attribute; `value` is the attribute asked about.
inline std::string attribute_question(std::size_t kind, std::size_t value) {
  switch (kind % 3) {
    case 0: return "Is it " + std::string(AttributeSet::colors[value]) + "?";
    case 1: return "Is it a " + std::string(AttributeSet::shapes[value]) + "?";
    default: return "Does it " + std::string(AttributeSet::verbs[value]) + "?";
  }
}

inline std::size_t attribute_value(const Attributes& a, std::size_t kind) {
  return kind % 3 == 0 ? a.color : kind % 3 == 1 ? a.shape : a.action;
}

struct CorpusSpec {
  std::uint64_t seed = 0;
  EncoderSpec encoder;
  std::size_t captions = 32;        // distinct attribute combinations, <= 64
  std::size_t yesno = 64;           // visual yes/no instruction pairs
  std::size_t language_only = 8;    // placeholder-conditioned instruction records
  std::size_t cache_entries = 4096; // image embeddings for the cache model
  std::size_t crossmodal = 64;      // audio yes/no queries
  double jitter = 0.15;             // latent noise around the attribute centre
};

struct SyntheticCorpus {
  std::vector<CaptionRecord> captions;
  std::vector<InstructionRecord> instruct;    // yes/no + language-only
  std::vector<InstructionRecord> hq;          // captioning instructions
  std::vector<InstructionRecord> lm_text;     // language-only base LM corpus
  std::vector<CaptionRecord> cache_images;    // cache model source
  std::vector<InstructionRecord> crossmodal;  // audio yes/no suite
  std::vector<Attributes> caption_attributes;
};

// Latent vectors: unit-normalized sum of one vector per attribute plus jitter.
class AttributeLatents {
 public:
  AttributeLatents(std::size_t dim, std::uint64_t seed) : dim_(dim) {
    CounterRng rng = CounterRng(seed).fork(0xa77);
    for (auto* table : {&colors_, &shapes_, &actions_})
      for (int i = 0; i < 4; ++i) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.normal();
        table->push_back(std::move(v));
      }
  }

  std::vector<double> sample(const Attributes& a, double jitter, CounterRng& rng) const {
    std::vector<double> z(dim_);
    for (std::size_t j = 0; j < dim_; ++j)
      z[j] = colors_[a.color][j] + shapes_[a.shape][j] + actions_[a.action][j] +
             jitter * std::sqrt(3.0) * rng.normal();
    const double n = l2_norm(z);
    for (double& x : z) x /= n;
    return z;
  }

 private:
  std::size_t dim_;
  std::vector<std::vector<double>> colors_, shapes_, actions_;
};

inline SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
  if (spec.captions == 0 || spec.captions > kAttributeCombos) {
    throw ConfigError("caption count must lie in [1, 64]");
  }
  const SyntheticWorld world(spec.encoder);
  const AttributeLatents latents(spec.encoder.raw_dim, spec.seed);
  CounterRng root(spec.seed);
  CounterRng pick = root.fork(1), noise = root.fork(2), qrng = root.fork(3), cache_rng = root.fork(4);

  SyntheticCorpus c;
  std::vector<std::size_t> combos(kAttributeCombos);
  for (std::size_t i = 0; i < combos.size(); ++i) combos[i] = i;
  for (std::size_t i = 0; i + 1 < combos.size(); ++i) std::swap(combos[i], combos[i + pick.below(combos.size() - i)]);

  std::vector<std::vector<double>> z;
  for (std::size_t i = 0; i < spec.captions; ++i) {
    const Attributes a = Attributes::from_index(combos[i]);
    z.push_back(latents.sample(a, spec.jitter, noise));
    char id[32];
    std::snprintf(id, sizeof id, "img-%03zu", i);
    c.captions.push_back({id, Modality::image, world.observe(Modality::image, z.back(), noise), a.caption()});
    c.caption_attributes.push_back(a);
    c.hq.push_back({std::string(kCaptionInstruction), a.caption(), id, Modality::image, c.captions.back().raw});
  }

  // Alternate yes and no answers across the caption images.
  auto make_question = [&](std::size_t img, bool yes, Modality m, const std::vector<double>& raw) {
    const Attributes& a = c.caption_attributes[img];
    const std::size_t kind = qrng.below(3);
    std::size_t value = attribute_value(a, kind);
    if (!yes) value = (value + 1 + qrng.below(3)) % 4;
    return InstructionRecord{yesno_instruction(attribute_question(kind, value)), yes ? "yes" : "no",
                             c.captions[img].source_id, m, raw};
  };
  for (std::size_t i = 0; i < spec.yesno; ++i) {
    const std::size_t img = i % spec.captions;
    c.instruct.push_back(make_question(img, (i / spec.captions + i) % 2 == 0, Modality::image, c.captions[img].raw));
  }
  for (std::size_t i = 0; i < spec.language_only; ++i) {
    const auto word = AttributeSet::colors[i % 4];
    c.instruct.push_back({"Repeat the word " + std::string(word) + ".", std::string(word), {}, {}, {}});
  }
  for (std::size_t i = 0; i < spec.crossmodal; ++i) {
    const std::size_t img = i % spec.captions;
    auto raw = world.observe(Modality::audio, z[img], noise);
    auto r = make_question(img, i % 2 == 0, Modality::audio, raw);
    r.source_id = "aud-" + c.captions[img].source_id.substr(4);
    c.crossmodal.push_back(std::move(r));
  }

  // Base LM text: every caption in the attribute grid, both bare and with the
  // attributes spelled out in the prompt, every question with both answers,
  // and the repeat-word instructions.
  for (std::size_t i = 0; i < kAttributeCombos; ++i) {
    const std::string cap = Attributes::from_index(i).caption();
    c.lm_text.push_back({std::string(kCaptionInstruction), cap, {}, {}, {}});
    c.lm_text.push_back({"Describe the " + cap.substr(2) + ".", cap, {}, {}, {}});
  }
  for (std::size_t kind = 0; kind < 3; ++kind)
    for (std::size_t v = 0; v < 4; ++v)
      for (const char* ans : {"yes", "no"})
        c.lm_text.push_back({yesno_instruction(attribute_question(kind, v)), ans, {}, {}, {}});
  for (auto* table : {&AttributeSet::colors, &AttributeSet::shapes, &AttributeSet::actions})
    for (auto w : *table) c.lm_text.push_back({"Repeat the word " + std::string(w) + ".", std::string(w), {}, {}, {}});

  for (std::size_t i = 0; i < spec.cache_entries; ++i) {
    const Attributes a = Attributes::from_index(cache_rng.below(kAttributeCombos));
    auto zi = latents.sample(a, spec.jitter, cache_rng);
    char id[32];
    std::snprintf(id, sizeof id, "cache-%05zu", i);
    c.cache_images.push_back({id, Modality::image, world.observe(Modality::image, zi, cache_rng), a.caption()});
  }
  return c;
}

// Texts the tokenizer is trained on: the formatted LM corpus. It covers every
// prompt the generator can emit and does not depend on the corpus seed.
inline std::vector<std::string> tokenizer_corpus(const SyntheticCorpus& c) {
  std::vector<std::string> out;
  for (const auto& r : c.lm_text) out.push_back(format_prompt(r.instruction) + format_response(r.response));
  return out;
}

inline constexpr std::size_t kDefaultVocab = 512;

inline Tokenizer train_default_tokenizer() {
  CorpusSpec spec;
  spec.cache_entries = 0;
  spec.crossmodal = 0;
  return Tokenizer::train(tokenizer_corpus(generate_corpus(spec)), kDefaultVocab);
}

}  // namespace bindllm
