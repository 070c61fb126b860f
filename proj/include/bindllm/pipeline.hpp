#pragma once

// Training plans, the staged training loop and the evaluation harness.
//
// Stages run in a fixed order: pretrain (bind network + gates, optionally
// preceded by a base-LM phase when starting from nothing), instruct (LoRA,
// biases, norms, gates) and hq_instruct (same groups, curated data). Every
// checkpoint lists the stages that produced it.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/cache_store.hpp"
#include "bindllm/checkpoint.hpp"
#include "bindllm/data.hpp"
#include "bindllm/optim.hpp"

namespace bindllm {

enum class Stage { pretrain, instruct, hq_instruct };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::instruct: return "instruct";
    case Stage::hq_instruct: return "hq_instruct";
  }
  return "?";
}

inline std::optional<Stage> parse_stage(std::string_view s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "instruct") return Stage::instruct;
  if (s == "hq" || s == "hq_instruct") return Stage::hq_instruct;
  return std::nullopt;
}

inline std::optional<ParamGroup> parse_group(std::string_view s) {
  for (ParamGroup g : {ParamGroup::bind_network, ParamGroup::gates, ParamGroup::lora, ParamGroup::bias_norm,
                       ParamGroup::base_lm, ParamGroup::encoders})
    if (s == group_name(g)) return g;
  return std::nullopt;
}

// Settings for the language-only phase that gives a fresh model its base LM.
struct LMPhase {
  std::string data;  // instruction JSONL; empty skips the phase
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double warmup_epochs = 1.0;
  double weight_decay = 0.1;  // keeps residual norms small enough for injection to steer
};

struct TrainPlan {
  Stage stage = Stage::pretrain;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double lr = 4e-4;
  double warmup_epochs = 1.0;
  std::optional<ParamGroups> trainable;  // empty: the stage default
  std::string data;
  std::uint64_t seed = 0;
  AdamConfig adam;
  std::size_t lora_rank = kDefaultLoraRank;

  // Used only when pretraining starts without an input checkpoint.
  LMPhase lm;
  std::string world;  // gen-data meta.json holding the encoder spec
  std::string vocab;  // tokenizer file
  LMConfig lm_config;
  std::size_t bind_hidden = 256;

  static TrainPlan defaults(Stage s) {
    TrainPlan p;
    p.stage = s;
    if (s != Stage::pretrain) {
      p.epochs = 4;
      p.batch_size = 16;
      p.lr = 1.25e-4;
    }
    return p;
  }

  ParamGroups groups() const {
    if (trainable) return *trainable;
    return stage == Stage::pretrain ? ParamGroups::pretrain() : ParamGroups::instruct();
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("plan: lr must be positive");
    if (epochs < 1) throw ConfigError("plan: epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("plan: batch_size must be at least 1");
    if (!(warmup_epochs >= 0.0)) throw ConfigError("plan: warmup_epochs must be non-negative");
    if (data.empty()) throw ConfigError("plan: no data path");
    if (!lm.data.empty()) {
      if (!(lm.lr > 0.0) || lm.epochs < 1 || lm.batch_size < 1 || !(lm.weight_decay >= 0.0)) throw ConfigError("plan: bad lm_* settings");
    }
    if (lora_rank < 1) throw ConfigError("plan: lora_rank must be at least 1");
  }
};

// Flat "key = value" plan files; '#' starts a comment, strings may be quoted.
// Relative paths resolve against the plan file's directory.
inline TrainPlan parse_plan(const std::string& text, Stage stage, const std::string& base_dir = {}) {
  TrainPlan p = TrainPlan::defaults(stage);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> ConfigError {
    return ConfigError("plan line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail("expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"') val = val.substr(1, val.size() - 2);
    auto num = [&]() -> double {
      std::size_t used = 0;
      double d = 0.0;
      try {
        d = std::stod(val, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != val.size() || val.empty()) throw fail("'" + key + "' needs a number, got '" + val + "'");
      return d;
    };
    auto count = [&]() -> std::size_t {
      const double d = num();
      if (d < 0 || d != std::floor(d)) throw fail("'" + key + "' needs a non-negative integer");
      return static_cast<std::size_t>(d);
    };
    auto flag = [&]() -> bool {
      if (val == "true") return true;
      if (val == "false") return false;
      throw fail("'" + key + "' needs true or false");
    };
    auto path = [&]() -> std::string {
      if (val.empty() || base_dir.empty() || std::filesystem::path(val).is_absolute()) return val;
      return (std::filesystem::path(base_dir) / val).string();
    };
    if (key == "stage") {
      auto s = parse_stage(val);
      if (!s) throw fail("unknown stage '" + val + "'");
      if (*s != stage) throw fail("plan is for stage '" + val + "' but stage '" + stage_name(stage) + "' was requested");
    } else if (key == "epochs") p.epochs = count();
    else if (key == "batch_size") p.batch_size = count();
    else if (key == "lr") p.lr = num();
    else if (key == "warmup_epochs") p.warmup_epochs = num();
    else if (key == "data") p.data = path();
    else if (key == "seed") p.seed = count();
    else if (key == "trainable") {
      ParamGroups g;
      std::istringstream parts(val);
      std::string part;
      while (std::getline(parts, part, ',')) {
        auto grp = parse_group(trim(part));
        if (!grp) throw fail("unknown parameter group '" + trim(part) + "'");
        g.trainable.insert(*grp);
      }
      p.trainable = g;
    } else if (key == "weight_decay") p.adam.weight_decay = num();
    else if (key == "clip_norm") p.adam.clip_norm = num();
    else if (key == "beta1") p.adam.beta1 = num();
    else if (key == "beta2") p.adam.beta2 = num();
    else if (key == "lora_rank") p.lora_rank = count();
    else if (key == "lm_data") p.lm.data = path();
    else if (key == "lm_epochs") p.lm.epochs = count();
    else if (key == "lm_batch_size") p.lm.batch_size = count();
    else if (key == "lm_lr") p.lm.lr = num();
    else if (key == "lm_warmup_epochs") p.lm.warmup_epochs = num();
    else if (key == "lm_weight_decay") p.lm.weight_decay = num();
    else if (key == "world") p.world = path();
    else if (key == "vocab") p.vocab = path();
    else if (key == "dim") p.lm_config.dim = count();
    else if (key == "layers") p.lm_config.layers = count();
    else if (key == "heads") p.lm_config.heads = count();
    else if (key == "max_seq") p.lm_config.max_seq = count();
    else if (key == "ffn_hidden") p.lm_config.ffn_hidden = count();
    else if (key == "rope") p.lm_config.rope = flag();
    else if (key == "shared_gate") p.lm_config.shared_gate = flag();
    else if (key == "bind_hidden") p.bind_hidden = count();
    else throw fail("unknown key '" + key + "'");
  }
  p.validate();
  return p;
}

inline TrainPlan load_plan(const std::string& path, Stage stage) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str(), stage, std::filesystem::path(path).parent_path().string());
}

// ---- world metadata written by gen-data ----

inline nlohmann::json world_to_json(const EncoderSpec& e, std::uint64_t corpus_seed) {
  return {{"encoder",
           {{"seed", e.seed},
            {"raw_dim", e.raw_dim},
            {"embed_dim", e.embed_dim},
            {"offset_norm", e.offset_norm},
            {"noise_scale", e.noise_scale}}},
          {"corpus_seed", corpus_seed}};
}

inline EncoderSpec load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open world file " + path);
  try {
    return encoder_spec_from_json(nlohmann::json::parse(in).at("encoder"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---- examples ----

struct Example {
  std::vector<int> prompt;
  std::vector<int> target;
  std::optional<JointEmbedding> embedding;  // absent: no condition at all
  bool placeholder = false;
};

inline std::vector<int> response_tokens(const Tokenizer& tok, std::string_view response) {
  auto t = tok.encode(format_response(response));
  t.push_back(Tokenizer::kEos);
  return t;
}

inline Example caption_example(const Tokenizer& tok, const SyntheticWorld& world, const CaptionRecord& r) {
  return {tok.encode(format_prompt(kCaptionInstruction)), response_tokens(tok, r.caption),
          world.encode(r.modality, r.raw, r.source_id), false};
}

inline Example instruction_example(const Tokenizer& tok, const SyntheticWorld& world, const InstructionRecord& r) {
  Example ex{tok.encode(format_prompt(r.instruction)), response_tokens(tok, r.response), std::nullopt, false};
  if (r.language_only()) {
    ex.embedding = placeholder_embedding(world.spec().embed_dim);
    ex.placeholder = true;
  } else {
    ex.embedding = world.encode(*r.modality, r.raw, *r.source_id);
  }
  return ex;
}

// Whole-sequence language modelling: the first token is the only prompt.
inline Example lm_example(const Tokenizer& tok, const InstructionRecord& r) {
  auto seq = tok.encode(format_prompt(r.instruction) + format_response(r.response));
  seq.push_back(Tokenizer::kEos);
  return {{seq.front()}, {seq.begin() + 1, seq.end()}, std::nullopt, false};
}

// ---- training loop ----

struct StepLog {
  std::string phase;  // "lm" or the stage name
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // global step after this update
  double loss = 0.0;       // batch mean before the update
  double lr = 0.0;
  double grad_norm = 0.0;
  std::vector<double> gates;
};

inline nlohmann::json to_json(const StepLog& s) {
  return {{"phase", s.phase}, {"epoch", s.epoch}, {"step", s.step}, {"loss", s.loss},
          {"lr", s.lr},       {"grad_norm", s.grad_norm}, {"gates", s.gates}};
}

struct EpochStats {
  std::string phase;
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t examples = 0;
  std::size_t placeholder_uses = 0;  // language-only records routed through the placeholder
};

inline nlohmann::json to_json(const EpochStats& e) {
  return {{"phase", e.phase}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"examples", e.examples},
          {"placeholder_uses", e.placeholder_uses}};
}

struct StageResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> epochs;
  std::size_t trainable_scalars = 0;
  std::size_t total_scalars = 0;
};

using StepCallback = std::function<void(const StepLog&)>;

namespace pipeline_detail {

inline Var example_loss(Tape& tape, Model& m, Example& ex) {
  const JointEmbedding* e = ex.embedding ? &*ex.embedding : nullptr;
  return caption_loss(tape, m.lm(), e ? &m.bind() : nullptr, e, ex.prompt, ex.target);
}

struct PhaseSettings {
  std::string name;
  std::size_t epochs, batch_size;
  double lr, warmup_epochs;
  AdamConfig adam;
};

// Shuffled minibatch descent over `examples`. Gradients are averaged over the
// batch; the loss reported per step is the batch mean before the update.
inline std::vector<EpochStats> run_phase(Checkpoint& c, std::vector<Example>& examples, const PhaseSettings& s,
                                         CounterRng& rng, const StepCallback& on_step) {
  if (examples.empty()) throw EmptyBatchError(s.name + ": no training examples");
  auto params = c.model.parameters();
  Adam opt(params, s.adam);
  const std::size_t n = examples.size();
  const std::size_t per_epoch = (n + s.batch_size - 1) / s.batch_size;
  const std::size_t total = per_epoch * s.epochs;
  const auto warmup = static_cast<std::size_t>(std::llround(s.warmup_epochs * double(per_epoch)));
  std::vector<std::size_t> order(n);
  std::vector<EpochStats> stats;
  std::size_t local = 0;
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
    EpochStats es{s.name, epoch, 0.0, 0, 0};
    for (std::size_t b = 0; b < n; b += s.batch_size) {
      const std::size_t end = std::min(n, b + s.batch_size);
      const double inv = 1.0 / double(end - b);
      const long step_no = static_cast<long>(c.step + 1);
      double batch_loss = 0.0;
      opt.zero_grad();
      try {
        for (std::size_t i = b; i < end; ++i) {
          Example& ex = examples[order[i]];
          Tape tape;
          Var loss = example_loss(tape, c.model, ex);
          const double l = loss.value()[0];
          if (!std::isfinite(l)) throw NumericError("non-finite loss");
          if (ex.placeholder) ++es.placeholder_uses;
          batch_loss += l;
          tape.backward(ops::scale(loss, inv));
        }
        const double lr = scheduled_lr(s.lr, local, total, warmup);
        const double gn = opt.step(lr);
        ++c.step;
        ++local;
        if (on_step) {
          StepLog log{s.name, epoch, c.step, batch_loss * inv, lr, gn, {}};
          log.gates = std::vector<double>(c.model.lm().gates().value.storage());
          on_step(log);
        }
      } catch (const NumericError& e) {
        throw DivergenceError(s.name + " diverged at step " + std::to_string(step_no) + ": " + e.what(), step_no);
      }
      es.mean_loss += batch_loss;
      es.examples += end - b;
    }
    es.mean_loss /= double(es.examples);
    stats.push_back(es);
  }
  return stats;
}

inline std::size_t scalar_count(Model& m, bool trainable_only) {
  std::size_t n = 0;
  for (const Parameter* p : m.parameters())
    if (!trainable_only || p->trainable) n += p->value.size();
  return n;
}

}  // namespace pipeline_detail

// Runs one stage from `plan`. `input` is required for instruct (a pretrain
// checkpoint) and hq_instruct (an instruct checkpoint); pretrain without an
// input builds a fresh model from plan.world / plan.vocab and, when
// plan.lm.data is set, first trains its base LM on that text.
inline StageResult run_stage(const TrainPlan& plan, std::optional<Checkpoint> input, const StepCallback& on_step = {}) {
  plan.validate();
  const char* want = nullptr;
  if (plan.stage == Stage::instruct) want = "pretrain";
  if (plan.stage == Stage::hq_instruct) want = "instruct";
  if (want && (!input || input->stage != want)) {
    throw PipelineError(std::string("stage ") + stage_name(plan.stage) + " requires a " + want + " checkpoint, got " +
                        (input ? "a " + input->stage + " checkpoint" : std::string("none")));
  }
  if (plan.stage == Stage::pretrain && input && input->stage != "pretrain") {
    throw PipelineError("stage pretrain cannot continue from a " + input->stage + " checkpoint");
  }

  StageResult res;
  Checkpoint& c = res.checkpoint;
  CounterRng root(plan.seed);
  if (input) {
    c = std::move(*input);
  } else {
    if (plan.world.empty() || plan.vocab.empty()) {
      throw ConfigError("pretraining from scratch needs 'world' and 'vocab' in the plan");
    }
    Tokenizer tok = Tokenizer::load(plan.vocab);
    ModelConfig mc;
    mc.encoder = load_world(plan.world);
    mc.lm = plan.lm_config;
    mc.lm.vocab_size = tok.vocab_size();
    mc.bind = {mc.encoder.embed_dim, mc.lm.dim, plan.bind_hidden};
    c.model = Model::init(mc, std::move(tok), root.fork(1).next_u64());
    c.stage = "init";
    if (!plan.lm.data.empty()) {
      auto records = ingest_instructions(plan.lm.data).records;
      std::vector<Example> ex;
      for (const auto& r : records) ex.push_back(lm_example(c.model.tokenizer(), r));
      auto params = c.model.parameters();
      apply_stage_freeze(params, ParamGroups::lm_pretrain());
      CounterRng rng = root.fork(2);
      AdamConfig adam = plan.adam;
      adam.weight_decay = plan.lm.weight_decay;
      auto stats = pipeline_detail::run_phase(
          c, ex, {"lm", plan.lm.epochs, plan.lm.batch_size, plan.lm.lr, plan.lm.warmup_epochs, adam}, rng, on_step);
      res.epochs.insert(res.epochs.end(), stats.begin(), stats.end());
      c.provenance.push_back("lm seed=" + std::to_string(plan.seed) + " steps=" + std::to_string(c.step));
    }
  }

  const SyntheticWorld world = c.model.world();
  const Tokenizer& tok = c.model.tokenizer();
  std::vector<Example> examples;
  if (plan.stage == Stage::pretrain) {
    for (const auto& r : ingest_captions(plan.data).records) examples.push_back(caption_example(tok, world, r));
  } else {
    if (!c.model.lm().has_lora()) c.model.attach_lora(plan.lora_rank, root.fork(3).next_u64());
    for (const auto& r : ingest_instructions(plan.data).records) examples.push_back(instruction_example(tok, world, r));
  }
  auto params = c.model.parameters();
  res.trainable_scalars = apply_stage_freeze(params, plan.groups());
  res.total_scalars = pipeline_detail::scalar_count(c.model, false);
  CounterRng rng = root.fork(10 + static_cast<std::uint64_t>(plan.stage));
  const std::uint64_t first = c.step;
  auto stats = pipeline_detail::run_phase(
      c, examples, {stage_name(plan.stage), plan.epochs, plan.batch_size, plan.lr, plan.warmup_epochs, plan.adam}, rng,
      on_step);
  res.epochs.insert(res.epochs.end(), stats.begin(), stats.end());
  c.stage = stage_name(plan.stage);
  c.rng = rng;
  c.provenance.push_back(std::string(stage_name(plan.stage)) + " seed=" + std::to_string(plan.seed) +
                         " steps=" + std::to_string(c.step - first));
  return res;
}

// ---- evaluation ----

enum class Suite { perplexity, yesno };

inline std::optional<Suite> parse_suite(std::string_view s) {
  if (s == "perplexity") return Suite::perplexity;
  if (s == "yesno") return Suite::yesno;
  return std::nullopt;
}

struct EvalOptions {
  const CacheStore* cache = nullptr;  // enhance visual queries before binding
  const PartitionedIndex* index = nullptr;
  EnhanceOptions enhance;
};

// The condition row for a record: bind(embedding), with the embedding first
// enhanced through the cache when one is given. Language-only records use
// the placeholder.
inline Tensor record_condition(Model& m, const SyntheticWorld& world, const InstructionRecord& r,
                               const EvalOptions& opt) {
  if (r.language_only()) return m.bind().forward(placeholder_embedding(world.spec().embed_dim).vector());
  const JointEmbedding e = world.encode(*r.modality, r.raw, *r.source_id);
  if (opt.cache) return m.bind().forward(*opt.cache->enhance(e.vector().data(), opt.enhance, opt.index).enhanced);
  return m.bind().forward(e.vector());
}

inline InstructionRecord as_instruction(const CaptionRecord& r) {
  return {std::string(kCaptionInstruction), r.caption, r.source_id, r.modality, r.raw};
}

// First generated token against the label's first token, greedy, under the
// fixed prompt template.
inline bool yesno_correct(Model& m, const SyntheticWorld& world, const InstructionRecord& r, const EvalOptions& opt) {
  const Tokenizer& tok = m.tokenizer();
  const auto prompt = tok.encode(format_prompt(yesno_instruction(r.instruction)));
  const int label = tok.encode(format_response(r.response)).front();
  GenerationParams gp;
  gp.max_new_tokens = 1;
  const auto out = generate_with_condition(m.lm(), record_condition(m, world, r, opt), prompt, gp);
  return out.front() == label;
}

inline nlohmann::json evaluate(Checkpoint& c, Suite suite, const std::vector<InstructionRecord>& data,
                               const EvalOptions& opt = {}) {
  if (data.empty()) throw EmptyBatchError("evaluate: empty data");
  Model& m = c.model;
  const SyntheticWorld world = m.world();
  nlohmann::json report{{"suite", suite == Suite::yesno ? "yesno" : "perplexity"},
                        {"stage", c.stage},
                        {"step", c.step},
                        {"records", data.size()}};
  if (opt.cache) report["cache"] = {{"k", opt.enhance.k}, {"alpha", opt.enhance.alpha}, {"entries", opt.cache->size()}};
  if (suite == Suite::yesno) {
    std::size_t correct = 0;
    for (const auto& r : data) {
      if (r.response != "yes" && r.response != "no") {
        throw IngestError("yes/no suite record has response \"" + r.response + "\"");
      }
      correct += yesno_correct(m, world, r, opt);
    }
    report["correct"] = correct;
    report["accuracy"] = double(correct) / double(data.size());
  } else {
    const Tokenizer& tok = m.tokenizer();
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto& r : data) {
      const auto prompt = tok.encode(format_prompt(r.instruction));
      const auto target = response_tokens(tok, r.response);
      std::vector<int> seq(prompt);
      seq.insert(seq.end(), target.begin(), target.end());
      const Tensor cond = record_condition(m, world, r, opt);
      const Tensor logits = m.lm().logits(std::span(seq).first(seq.size() - 1), &cond);
      for (std::size_t i = prompt.size() - 1; i + 1 < seq.size(); ++i) {
        auto row = logits.row_span(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        nll += mx + std::log(z) - row[static_cast<std::size_t>(seq[i + 1])];
        ++tokens;
      }
    }
    report["tokens"] = tokens;
    report["mean_nll"] = nll / double(tokens);
    report["perplexity"] = std::exp(nll / double(tokens));
  }
  return report;
}

// Greedy caption for one record under the captioning prompt.
inline std::string caption_for(Model& m, const SyntheticWorld& world, const CaptionRecord& r,
                               const EvalOptions& opt = {}, std::size_t max_new = 24) {
  const Tokenizer& tok = m.tokenizer();
  const auto prompt = tok.encode(format_prompt(kCaptionInstruction));
  GenerationParams gp;
  gp.max_new_tokens = std::min(max_new, m.lm().config().max_seq - prompt.size());
  auto out = generate_with_condition(m.lm(), record_condition(m, world, as_instruction(r), opt), prompt, gp);
  if (!out.empty() && out.back() == Tokenizer::kEos) out.pop_back();
  std::string text = tok.decode(out);
  if (text.starts_with(' ')) text.erase(0, 1);
  return text;
}

}  // namespace bindllm
