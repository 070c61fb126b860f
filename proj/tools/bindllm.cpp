// Command-line front end: corpus generation, staged training, generation,
// cache tooling, modality mixing and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bindllm/pipeline.hpp"

using namespace bindllm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IngestError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IngestError("write to " + path + " failed");
}

// Emits a JSON document to `path`, or to stdout when the path is empty.
void emit(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_text(path, j.dump(2) + "\n");
  }
}

// The encoder world comes from a checkpoint when one is given, otherwise from
// a gen-data meta.json.
SyntheticWorld world_from(const std::string& ckpt, const std::string& world) {
  if (!ckpt.empty()) return load_checkpoint(ckpt).model.world();
  if (world.empty()) throw ConfigError("need --ckpt or --world to know the encoders");
  return SyntheticWorld(load_world(world));
}

RawSample pick_sample(const std::string& path, const std::string& id) {
  const auto samples = read_raw_samples(path);
  if (samples.empty()) throw IngestError(path + ": no samples");
  if (id.empty()) return samples.front();
  for (const auto& s : samples)
    if (s.source_id == id) return s;
  throw IngestError(path + ": no sample with source_id \"" + id + "\"");
}

Modality modality_arg(const std::string& s) {
  auto m = parse_modality(s);
  if (!m || *m == Modality::mixed) throw ConfigError("unknown modality '" + s + "'");
  return *m;
}

struct CacheArgs {
  std::string path;
  std::size_t k = 16;
  double alpha = 0.5;
  std::size_t nlist = 0;  // 0: exact search
  std::size_t nprobe = 0;
  bool raw = false;
};

void add_cache_flags(CLI::App* cmd, CacheArgs& a, bool path_required) {
  auto* o = cmd->add_option("--cache", a.path, "Cache file written by 'cache build'");
  if (path_required) o->required();
  cmd->add_option("--k", a.k, "Neighbours retrieved per query")->check(CLI::PositiveNumber);
  cmd->add_option("--alpha", a.alpha, "Blend factor between retrieved values and the query")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--nlist", a.nlist, "Search a partitioned index with this many lists (0 = exact)");
  cmd->add_option("--nprobe", a.nprobe, "Lists scanned per query (0 = tune for recall 0.95)");
  cmd->add_flag("--raw-weights", a.raw, "Weight values by raw similarity instead of normalized weights");
}

struct LoadedCache {
  CacheStore store;
  std::optional<PartitionedIndex> index;
};

std::optional<LoadedCache> load_cache(const CacheArgs& a, std::size_t dim, std::uint64_t seed) {
  if (a.path.empty()) return std::nullopt;
  LoadedCache c{CacheStore::load(a.path, dim), std::nullopt};
  if (a.nlist > 0) {
    c.index = PartitionedIndex::build(c.store, a.nlist, seed);
    if (a.nprobe > 0) {
      c.index->set_nprobe(a.nprobe);
    } else {
      c.index->tune(c.store, std::min(a.k, c.store.size()), 0.95, seed);
    }
  }
  return c;
}

EnhanceOptions enhance_options(const CacheArgs& a) { return {a.k, a.alpha, a.raw}; }

nlohmann::json retrieval_json(const CacheStore& store, const RetrievalResult& r) {
  nlohmann::json hits = nlohmann::json::array();
  for (std::size_t i = 0; i < r.indices.size(); ++i) {
    hits.push_back({{"index", r.indices[i]}, {"source_id", store.ids()[r.indices[i]]}, {"similarity", r.similarities[i]}});
  }
  return hits;
}

std::vector<double> as_vector(const Tensor& t) { return {t.storage().begin(), t.storage().end()}; }

// ---- subcommands ----

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 0;
  std::size_t cache_entries = 4096;
};

int gen_data(const GenDataArgs& a) {
  fs::create_directories(a.out);
  CorpusSpec spec;
  spec.seed = a.seed;
  spec.cache_entries = a.cache_entries;
  const SyntheticCorpus c = generate_corpus(spec);
  const std::string d = a.out + "/";
  write_jsonl(d + "captions.jsonl", c.captions);
  write_jsonl(d + "instruct.jsonl", c.instruct);
  write_jsonl(d + "hq.jsonl", c.hq);
  write_jsonl(d + "lm.jsonl", c.lm_text);
  write_jsonl(d + "crossmodal.jsonl", c.crossmodal);
  write_jsonl(d + "cache_images.jsonl", c.cache_images);
  write_text(d + "meta.json", world_to_json(spec.encoder, spec.seed).dump(2) + "\n");
  train_default_tokenizer().save(d + "vocab.bpe");
  const std::string seed = std::to_string(a.seed);
  write_text(d + "pretrain.toml", "stage = pretrain\ndata = captions.jsonl\nworld = meta.json\nvocab = vocab.bpe\n"
                                  "lm_data = lm.jsonl\nseed = " + seed + "\n");
  write_text(d + "instruct.toml", "stage = instruct\ndata = instruct.jsonl\nseed = " + seed + "\n");
  write_text(d + "hq.toml", "stage = hq_instruct\ndata = hq.jsonl\nseed = " + seed + "\n");
  std::cout << "wrote " << c.captions.size() << " captions, " << c.instruct.size() << " instructions, "
            << c.hq.size() << " hq, " << c.lm_text.size() << " lm texts, " << c.crossmodal.size()
            << " cross-modal queries, " << c.cache_images.size() << " cache images to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string stage, plan, ckpt_in, out, log, metrics, adapters_out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int train(const TrainArgs& a) {
  const auto stage = parse_stage(a.stage);
  if (!stage) throw ConfigError("unknown stage '" + a.stage + "'");
  TrainPlan plan = load_plan(a.plan, *stage);
  if (a.seed) plan.seed = *a.seed;
  std::optional<Checkpoint> in;
  if (!a.ckpt_in.empty()) in = load_checkpoint(a.ckpt_in);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::trunc);
    if (!log) throw IngestError("cannot open " + a.log + " for writing");
  }
  auto res = run_stage(plan, std::move(in), [&](const StepLog& s) {
    if (log) log << to_json(s).dump() << '\n';
  });
  save_checkpoint(res.checkpoint, a.out);
  if (!a.adapters_out.empty()) save_checkpoint(res.checkpoint, a.adapters_out, true);
  nlohmann::json m{{"stage", res.checkpoint.stage},
                   {"seed", plan.seed},
                   {"steps", res.checkpoint.step},
                   {"trainable_scalars", res.trainable_scalars},
                   {"total_scalars", res.total_scalars},
                   {"gates", as_vector(res.checkpoint.model.lm().gates().value)},
                   {"provenance", res.checkpoint.provenance},
                   {"epochs", nlohmann::json::array()}};
  for (const auto& e : res.epochs) m["epochs"].push_back(to_json(e));
  if (!a.metrics.empty()) emit(m, a.metrics);
  if (!a.quiet) {
    for (const auto& e : res.epochs) {
      std::printf("%-11s epoch %3zu  mean loss %.6f\n", e.phase.c_str(), e.epoch, e.mean_loss);
    }
    std::printf("trainable %zu of %zu scalars; checkpoint %s\n", res.trainable_scalars, res.total_scalars,
                a.out.c_str());
  }
  return 0;
}

struct GenerateArgs {
  std::string ckpt, modality, input, source_id, prompt;
  CacheArgs cache;
  std::size_t max_new = 24;
  double temperature = 0.0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
  bool no_condition = false;
};

int generate(const GenerateArgs& a) {
  Checkpoint c = load_checkpoint(a.ckpt);
  Model& m = c.model;
  const SyntheticWorld world = m.world();
  std::optional<Tensor> cond;
  nlohmann::json report{{"prompt", a.prompt}};
  if (!a.no_condition) {
    if (a.input.empty() || a.modality.empty()) throw ConfigError("generate needs --modality and --input");
    const RawSample s = pick_sample(a.input, a.source_id);
    const JointEmbedding e = world.encode(modality_arg(a.modality), s.raw, s.source_id);
    Tensor v = e.vector();
    if (auto cache = load_cache(a.cache, world.spec().embed_dim, a.seed)) {
      auto r = cache->store.enhance(e.vector().data(), enhance_options(a.cache), cache->index ? &*cache->index : nullptr);
      v = *r.enhanced;
      report["retrieved"] = retrieval_json(cache->store, r);
    }
    cond = m.bind().forward(v);
    report["source_id"] = s.source_id;
  }
  const auto prompt = m.tokenizer().encode(format_prompt(a.prompt));
  GenerationParams gp;
  gp.max_new_tokens = std::min(a.max_new, m.lm().config().max_seq - std::min(prompt.size(), m.lm().config().max_seq));
  gp.temperature = a.temperature;
  gp.top_k = a.top_k;
  gp.seed = a.seed;
  auto out = generate_with_condition(m.lm(), cond, prompt, gp);
  report["tokens"] = out;
  if (!out.empty() && out.back() == Tokenizer::kEos) out.pop_back();
  std::string text = m.tokenizer().decode(out);
  if (text.starts_with(' ')) text.erase(0, 1);
  report["text"] = text;
  std::cout << report.dump() << '\n';
  return 0;
}

struct CacheBuildArgs {
  std::string input, out, ckpt, world;
};

int cache_build_cmd(const CacheBuildArgs& a) {
  const SyntheticWorld world = world_from(a.ckpt, a.world);
  CacheStore store;
  for (const auto& s : read_raw_samples(a.input)) store.add(world.encode(s.modality, s.raw, s.source_id));
  if (store.empty()) throw EmptyCacheError(a.input + ": no samples to cache");
  store.save(a.out);
  std::cout << "cached " << store.size() << " embeddings of dimension " << store.dim() << " in " << a.out << '\n';
  return 0;
}

struct CacheQueryArgs {
  std::string input, ckpt, world, modality, out;
  CacheArgs cache;
  std::uint64_t seed = 0;
};

// Shared by 'cache query' and 'cache enhance': one JSON line per input sample.
int cache_lookup(const CacheQueryArgs& a, bool enhance) {
  const SyntheticWorld world = world_from(a.ckpt, a.world);
  auto cache = load_cache(a.cache, world.spec().embed_dim, a.seed);
  const PartitionedIndex* index = cache->index ? &*cache->index : nullptr;
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw IngestError("cannot open " + a.out + " for writing");
  }
  std::ostream& os = a.out.empty() ? std::cout : file;
  for (const auto& s : read_raw_samples(a.input)) {
    const Modality m = a.modality.empty() ? s.modality : modality_arg(a.modality);
    const JointEmbedding e = world.encode(m, s.raw, s.source_id);
    nlohmann::json line{{"source_id", s.source_id}};
    if (enhance) {
      auto r = cache->store.enhance(e.vector().data(), enhance_options(a.cache), index);
      line["retrieved"] = retrieval_json(cache->store, r);
      line["embedding"] = as_vector(*r.enhanced);
    } else {
      auto r = index ? index->search(cache->store, e.vector().data(), a.cache.k) : cache->store.topk(e, a.cache.k);
      line["retrieved"] = retrieval_json(cache->store, r);
    }
    os << line.dump() << '\n';
  }
  return 0;
}

struct MixArgs {
  std::vector<std::string> inputs;
  std::string ckpt, world, prompt, out;
  std::size_t max_new = 24;
  std::uint64_t seed = 0;
};

// Each input is path:coefficient; the first sample of each file is encoded
// with its own modality and the embeddings are mixed.
int mix_cmd(const MixArgs& a) {
  std::optional<Checkpoint> c;
  if (!a.ckpt.empty()) c = load_checkpoint(a.ckpt);
  const SyntheticWorld world = c ? c->model.world() : world_from("", a.world);
  std::vector<JointEmbedding> es;
  std::vector<double> coef;
  for (const auto& in : a.inputs) {
    const auto colon = in.rfind(':');
    if (colon == std::string::npos || colon == 0) throw ConfigError("mix input '" + in + "' is not path:coefficient");
    std::size_t used = 0;
    double w = 0.0;
    try {
      w = std::stod(in.substr(colon + 1), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != in.size() - colon - 1) throw ConfigError("mix input '" + in + "' has a bad coefficient");
    const RawSample s = pick_sample(in.substr(0, colon), "");
    es.push_back(world.encode(s.modality, s.raw, s.source_id));
    coef.push_back(w);
  }
  const JointEmbedding mixed = mix(es, coef);
  nlohmann::json report{{"source_id", mixed.source_id()}, {"embedding", as_vector(mixed.vector())}};
  if (c && !a.prompt.empty()) {
    Model& m = c->model;
    const auto prompt = m.tokenizer().encode(format_prompt(a.prompt));
    GenerationParams gp;
    gp.max_new_tokens = std::min(a.max_new, m.lm().config().max_seq - std::min(prompt.size(), m.lm().config().max_seq));
    gp.seed = a.seed;
    auto out = generate_with_condition(m.lm(), m.bind().forward(mixed.vector()), prompt, gp);
    if (!out.empty() && out.back() == Tokenizer::kEos) out.pop_back();
    std::string text = m.tokenizer().decode(out);
    if (text.starts_with(' ')) text.erase(0, 1);
    report["text"] = text;
  }
  emit(report, a.out);
  return 0;
}

struct EvalArgs {
  std::string suite, ckpt, data, out;
  CacheArgs cache;
  std::uint64_t seed = 0;
};

int eval_cmd(const EvalArgs& a) {
  const auto suite = parse_suite(a.suite);
  if (!suite) throw ConfigError("unknown suite '" + a.suite + "'");
  Checkpoint c = load_checkpoint(a.ckpt);
  const auto data = ingest_instructions(a.data);
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << '\n';
  auto cache = load_cache(a.cache, c.model.world().spec().embed_dim, a.seed);
  EvalOptions opt;
  if (cache) {
    opt.cache = &cache->store;
    opt.index = cache->index ? &*cache->index : nullptr;
    opt.enhance = enhance_options(a.cache);
  }
  auto report = evaluate(c, *suite, data.records, opt);
  report["data"] = a.data;
  emit(report, a.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-gated multimodal injection into a small language model"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic corpora, world metadata, vocabulary and plans");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--seed", gd.seed, "Corpus seed");
  gen->add_option("--cache-entries", gd.cache_entries, "Image embeddings for the cache model");

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* trn = app.add_subcommand("train", "Run one training stage");
  trn->add_option("--stage", tr.stage, "pretrain, instruct or hq")
      ->required()
      ->check(CLI::IsMember({"pretrain", "instruct", "hq", "hq_instruct"}));
  trn->add_option("--plan", tr.plan, "Plan file (key = value)")->required();
  trn->add_option("--ckpt-in", tr.ckpt_in, "Checkpoint from the previous stage");
  trn->add_option("--out", tr.out, "Output checkpoint")->required();
  trn->add_option("--adapters-out", tr.adapters_out, "Also write an adapter-only checkpoint");
  trn->add_option("--log", tr.log, "Per-step JSONL log");
  trn->add_option("--metrics", tr.metrics, "Per-epoch metrics report (JSON)");
  auto* seed_opt = trn->add_option("--seed", train_seed, "Override the plan seed");
  trn->add_flag("--quiet", tr.quiet, "Print nothing on success");

  GenerateArgs ge;
  auto* gnr = app.add_subcommand("generate", "Generate a response conditioned on one encoded input");
  gnr->add_option("--ckpt", ge.ckpt, "Checkpoint")->required();
  gnr->add_option("--modality", ge.modality, "Encoder to apply to the input");
  gnr->add_option("--input", ge.input, "JSONL of raw samples");
  gnr->add_option("--source-id", ge.source_id, "Sample to use (default: the first)");
  gnr->add_option("--prompt", ge.prompt, "Instruction text")->required();
  gnr->add_option("--max-new", ge.max_new, "Maximum new tokens");
  gnr->add_option("--temperature", ge.temperature, "Sampling temperature (0 = greedy)")->check(CLI::NonNegativeNumber);
  gnr->add_option("--top-k", ge.top_k, "Sample from the k most likely tokens (0 = all)");
  gnr->add_option("--seed", ge.seed, "Sampling and index seed");
  gnr->add_flag("--no-condition", ge.no_condition, "Run the language model without any injected condition");
  add_cache_flags(gnr, ge.cache, false);

  auto* cache = app.add_subcommand("cache", "Build and query the retrieval cache");
  cache->require_subcommand(1);
  CacheBuildArgs cb;
  std::uint64_t build_seed = 0;
  auto* cbuild = cache->add_subcommand("build", "Encode raw samples and store their embeddings");
  cbuild->add_option("--input", cb.input, "JSONL of raw samples")->required();
  cbuild->add_option("--out", cb.out, "Cache file")->required();
  cbuild->add_option("--ckpt", cb.ckpt, "Take the encoders from this checkpoint");
  cbuild->add_option("--world", cb.world, "Take the encoders from this meta.json");
  cbuild->add_option("--seed", build_seed, "Unused; accepted for uniformity");
  CacheQueryArgs cq, ce;
  for (auto [name, args, help] : {std::tuple{"query", &cq, "Top-k neighbours of each encoded input"},
                                  std::tuple{"enhance", &ce, "Cache-enhanced embedding of each encoded input"}}) {
    auto* sub = cache->add_subcommand(name, help);
    sub->add_option("--input", args->input, "JSONL of raw samples")->required();
    sub->add_option("--modality", args->modality, "Override each sample's modality");
    sub->add_option("--ckpt", args->ckpt, "Take the encoders from this checkpoint");
    sub->add_option("--world", args->world, "Take the encoders from this meta.json");
    sub->add_option("--out", args->out, "Write JSONL here instead of stdout");
    sub->add_option("--seed", args->seed, "Index seed");
    add_cache_flags(sub, args->cache, true);
  }

  MixArgs mx;
  auto* mixc = app.add_subcommand("mix", "Mix encoded inputs from several modalities");
  mixc->add_option("--inputs", mx.inputs, "path:coefficient pairs")
      ->required()
      ->expected(1, -1)
      ->check(CLI::Validator(
          [](std::string& in) -> std::string {
            const auto colon = in.rfind(':');
            double w = 0.0;
            if (colon == std::string::npos || colon == 0 || !CLI::detail::lexical_cast(in.substr(colon + 1), w)) {
              return "'" + in + "' is not path:coefficient";
            }
            return {};
          },
          "PATH:COEF"));
  mixc->add_option("--ckpt", mx.ckpt, "Checkpoint (encoders, and generation with --prompt)");
  mixc->add_option("--world", mx.world, "meta.json when no checkpoint is given");
  mixc->add_option("--prompt", mx.prompt, "Generate a response to this instruction from the mixture");
  mixc->add_option("--max-new", mx.max_new, "Maximum new tokens");
  mixc->add_option("--out", mx.out, "Write the report here instead of stdout");
  mixc->add_option("--seed", mx.seed, "Sampling seed");

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "Evaluate a checkpoint on a suite");
  evc->add_option("--suite", ev.suite, "yesno or perplexity")->required()->check(CLI::IsMember({"yesno", "perplexity"}));
  evc->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  evc->add_option("--data", ev.data, "Instruction JSONL")->required();
  evc->add_option("--out", ev.out, "Write the report here instead of stdout");
  evc->add_option("--seed", ev.seed, "Index seed");
  add_cache_flags(evc, ev.cache, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << '\n' << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return gen_data(gd);
    if (*trn) {
      if (*seed_opt) tr.seed = train_seed;
      return train(tr);
    }
    if (*gnr) return generate(ge);
    if (*cbuild) return cache_build_cmd(cb);
    if (cache->got_subcommand("query")) return cache_lookup(cq, false);
    if (cache->got_subcommand("enhance")) return cache_lookup(ce, true);
    if (*mixc) return mix_cmd(mx);
    if (*evc) return eval_cmd(ev);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
