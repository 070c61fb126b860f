#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "bindllm/pipeline.hpp"

using namespace bindllm;

namespace {

namespace fs = std::filesystem;

struct World {
  std::string dir;
  SyntheticCorpus corpus;
};

// Generated corpora on disk, shared by every test in this file.
const World& world() {
  static const World w = [] {
    World w;
    w.dir = (fs::temp_directory_path() / "bindllm_test_pipeline").string();
    fs::create_directories(w.dir);
    CorpusSpec spec;
    spec.seed = 5;
    spec.cache_entries = 64;
    w.corpus = generate_corpus(spec);
    write_jsonl(w.dir + "/captions.jsonl", w.corpus.captions);
    write_jsonl(w.dir + "/instruct.jsonl", w.corpus.instruct);
    write_jsonl(w.dir + "/hq.jsonl", w.corpus.hq);
    write_jsonl(w.dir + "/lm.jsonl", w.corpus.lm_text);
    std::ofstream(w.dir + "/meta.json") << world_to_json(spec.encoder, spec.seed).dump();
    train_default_tokenizer().save(w.dir + "/vocab.bpe");
    return w;
  }();
  return w;
}

// Small dims so a whole stage runs in well under a second.
TrainPlan small_plan(Stage s) {
  const World& w = world();
  TrainPlan p = TrainPlan::defaults(s);
  p.seed = 3;
  p.world = w.dir + "/meta.json";
  p.vocab = w.dir + "/vocab.bpe";
  p.lm_config.dim = 16;
  p.lm_config.layers = 2;
  p.lm_config.heads = 2;
  p.lm_config.max_seq = 48;
  p.lm_config.ffn_hidden = 32;
  p.bind_hidden = 32;
  p.lora_rank = 2;
  p.data = w.dir + (s == Stage::pretrain ? "/captions.jsonl" : s == Stage::instruct ? "/instruct.jsonl" : "/hq.jsonl");
  return p;
}

Checkpoint pretrained() {
  TrainPlan p = small_plan(Stage::pretrain);
  p.epochs = 1;
  return run_stage(p, std::nullopt).checkpoint;
}

std::string pipeline_error(const TrainPlan& p, std::optional<Checkpoint> in) {
  try {
    run_stage(p, std::move(in));
  } catch (const PipelineError& e) {
    return e.what();
  }
  return "";
}

std::string config_error(const std::string& text, Stage s = Stage::pretrain) {
  try {
    parse_plan(text, s);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Plan, StageDefaults) {
  const TrainPlan pre = TrainPlan::defaults(Stage::pretrain);
  EXPECT_EQ(pre.epochs, 3u);
  EXPECT_EQ(pre.batch_size, 32u);
  EXPECT_EQ(pre.lr, 4e-4);
  EXPECT_EQ(pre.warmup_epochs, 1.0);
  EXPECT_EQ(pre.groups().trainable, ParamGroups::pretrain().trainable);
  for (Stage s : {Stage::instruct, Stage::hq_instruct}) {
    const TrainPlan p = TrainPlan::defaults(s);
    EXPECT_EQ(p.epochs, 4u);
    EXPECT_EQ(p.batch_size, 16u);
    EXPECT_EQ(p.lr, 1.25e-4);
    EXPECT_EQ(p.warmup_epochs, 1.0);
    EXPECT_EQ(p.groups().trainable, ParamGroups::instruct().trainable);
  }
  EXPECT_EQ(pre.adam.beta1, 0.9);
  EXPECT_EQ(pre.adam.beta2, 0.95);
  EXPECT_EQ(pre.adam.weight_decay, 0.01);
}

TEST(Plan, ParsesKeysCommentsAndPaths) {
  const TrainPlan p = parse_plan(
      "# stage one\n"
      "stage = pretrain\n"
      "epochs = 5   # trailing comment\n"
      "batch_size=4\n"
      "lr = 2.5e-3\n"
      "data = \"caps#1.jsonl\"\n"
      "world = /abs/meta.json\n"
      "trainable = bind_network, gates\n"
      "lm_data = lm.jsonl\n"
      "lm_weight_decay = 0.2\n"
      "rope = false\n"
      "\n",
      Stage::pretrain, "/base");
  EXPECT_EQ(p.epochs, 5u);
  EXPECT_EQ(p.batch_size, 4u);
  EXPECT_EQ(p.lr, 2.5e-3);
  EXPECT_EQ(p.data, "/base/caps#1.jsonl");
  EXPECT_EQ(p.world, "/abs/meta.json");
  EXPECT_EQ(p.lm.data, "/base/lm.jsonl");
  EXPECT_EQ(p.lm.weight_decay, 0.2);
  EXPECT_FALSE(p.lm_config.rope);
  ASSERT_TRUE(p.trainable);
  EXPECT_EQ(p.trainable->trainable, ParamGroups::pretrain().trainable);
}

TEST(Plan, ErrorsNameTheLine) {
  EXPECT_NE(config_error("data = x\nfoo = 1\n").find("plan line 2: unknown key 'foo'"), std::string::npos);
  EXPECT_NE(config_error("data = x\nlr = fast\n").find("plan line 2: 'lr' needs a number"), std::string::npos);
  EXPECT_NE(config_error("epochs\n").find("plan line 1: expected key = value"), std::string::npos);
  EXPECT_NE(config_error("epochs = 1.5\n").find("non-negative integer"), std::string::npos);
  EXPECT_NE(config_error("stage = instruct\n").find("was requested"), std::string::npos);
  EXPECT_NE(config_error("stage = warmup\n").find("unknown stage"), std::string::npos);
  EXPECT_NE(config_error("data = x\ntrainable = bind_network, wings\n").find("unknown parameter group 'wings'"),
            std::string::npos);
  EXPECT_NE(config_error("data = x\nlr = 0\n").find("lr must be positive"), std::string::npos);
  EXPECT_NE(config_error("data = x\nepochs = 0\n").find("epochs must be at least 1"), std::string::npos);
  EXPECT_NE(config_error("epochs = 2\n").find("no data path"), std::string::npos);
  EXPECT_THROW(load_plan("/nonexistent/plan.toml", Stage::pretrain), ConfigError);
}

TEST(Pipeline, StageOrderingIsEnforced) {
  EXPECT_NE(pipeline_error(small_plan(Stage::instruct), std::nullopt).find("requires a pretrain checkpoint, got none"),
            std::string::npos);
  Checkpoint pre = pretrained();
  EXPECT_NE(pipeline_error(small_plan(Stage::hq_instruct), pre).find("requires a instruct checkpoint"),
            std::string::npos);
  auto ins = run_stage(small_plan(Stage::instruct), pre).checkpoint;
  EXPECT_NE(pipeline_error(small_plan(Stage::instruct), ins).find("got a instruct checkpoint"), std::string::npos);
  EXPECT_NE(pipeline_error(small_plan(Stage::pretrain), ins).find("cannot continue"), std::string::npos);
  auto hq = run_stage(small_plan(Stage::hq_instruct), ins).checkpoint;
  EXPECT_EQ(hq.stage, "hq_instruct");
  ASSERT_EQ(hq.provenance.size(), 3u);
  EXPECT_TRUE(hq.provenance[0].starts_with("pretrain seed=3"));
  EXPECT_TRUE(hq.provenance[1].starts_with("instruct seed=3"));
  EXPECT_TRUE(hq.provenance[2].starts_with("hq_instruct seed=3"));
}

TEST(Pipeline, FirstStepLossEqualsUnconditionedLoss) {
  TrainPlan p = small_plan(Stage::pretrain);
  p.epochs = 1;
  p.batch_size = 1;
  double first = std::nan("");
  Checkpoint fresh;
  auto res = run_stage(p, std::nullopt, [&](const StepLog& s) {
    if (s.step == 1) first = s.loss;
  });
  // Rebuild the untrained model the stage started from.
  {
    Tokenizer tok = Tokenizer::load(p.vocab);
    ModelConfig mc;
    mc.encoder = load_world(p.world);
    mc.lm = p.lm_config;
    mc.lm.vocab_size = tok.vocab_size();
    mc.bind = {mc.encoder.embed_dim, mc.lm.dim, p.bind_hidden};
    fresh.model = Model::init(mc, std::move(tok), CounterRng(p.seed).fork(1).next_u64());
  }
  const SyntheticWorld w = fresh.model.world();
  std::vector<double> plain;
  for (const auto& r : world().corpus.captions) {
    Example ex = caption_example(fresh.model.tokenizer(), w, r);
    Tape t1, t2;
    const double cond = pipeline_detail::example_loss(t1, fresh.model, ex).value()[0];
    const double none = caption_loss(t2, fresh.model.lm(), nullptr, nullptr, ex.prompt, ex.target).value()[0];
    EXPECT_EQ(cond, none);
    plain.push_back(none);
  }
  EXPECT_NE(std::find(plain.begin(), plain.end(), first), plain.end()) << first;
}

TEST(Pipeline, PlaceholderCounterMatchesLanguageOnlyRecords) {
  Checkpoint pre = pretrained();
  TrainPlan p = small_plan(Stage::instruct);
  p.epochs = 2;
  auto res = run_stage(p, pre);
  const auto records = ingest_instructions(p.data).records;
  const auto lang = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const InstructionRecord& r) { return r.language_only(); }));
  ASSERT_GT(lang, 0u);
  std::size_t epochs = 0;
  for (const auto& e : res.epochs) {
    if (e.phase != "instruct") continue;
    ++epochs;
    EXPECT_EQ(e.placeholder_uses, lang);
    EXPECT_EQ(e.examples, records.size());
  }
  EXPECT_EQ(epochs, 2u);
}

TEST(Pipeline, DivergenceCarriesStepNumber) {
  // The base-LM phase has nonzero gradients from the first step (the zero
  // head does not block them), so a huge step soon overflows the forward.
  TrainPlan p = small_plan(Stage::pretrain);
  p.lm.data = world().dir + "/lm.jsonl";
  p.lm.lr = 1e300;
  p.lm.warmup_epochs = 0;
  p.adam.clip_norm = 0;
  try {
    run_stage(p, std::nullopt);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.step(), 1);
    EXPECT_LE(e.step(), 5);
    EXPECT_NE(std::string(e.what()).find("lm diverged at step " + std::to_string(e.step()) + ":"), std::string::npos)
        << e.what();
  }
}

TEST(Pipeline, SameSeedSameBytes) {
  TrainPlan p = small_plan(Stage::pretrain);
  p.epochs = 1;
  p.batch_size = 8;
  p.lm.data = world().dir + "/lm.jsonl";
  p.lm.epochs = 1;
  auto a = run_stage(p, std::nullopt).checkpoint;
  auto b = run_stage(p, std::nullopt).checkpoint;
  const auto ba = serialize_checkpoint(a);
  EXPECT_EQ(ba, serialize_checkpoint(b));
  ASSERT_EQ(a.provenance.size(), 2u);
  EXPECT_TRUE(a.provenance[0].starts_with("lm seed=3"));
  p.seed = 4;
  auto c = run_stage(p, std::nullopt).checkpoint;
  EXPECT_NE(ba, serialize_checkpoint(c));
}

TEST(Pipeline, StageOneTrainsBindAndGatesOnly) {
  TrainPlan p = small_plan(Stage::pretrain);
  p.epochs = 1;
  auto res = run_stage(p, std::nullopt);
  const std::size_t ci = 64, c = 16, ch = 32, l = 2;
  EXPECT_EQ(res.trainable_scalars, ci * c + 3 * (2 * c * ch + ch * c + c) + l);
  for (Parameter* q : res.checkpoint.model.parameters()) {
    const bool want = q->group == ParamGroup::bind_network || q->group == ParamGroup::gates;
    EXPECT_EQ(q->trainable, want) << q->name;
  }
}

TEST(Pipeline, GatesLeaveZeroWhenTheConditionInforms) {
  // Needs a base LM: with the zero-initialized head nothing upstream of the
  // logits receives gradient.
  TrainPlan p = small_plan(Stage::pretrain);
  p.lm.data = world().dir + "/lm.jsonl";
  p.lm.epochs = 3;
  p.epochs = 4;
  p.batch_size = 4;
  p.lr = 1e-2;
  auto res = run_stage(p, std::nullopt);
  double g = 0.0;
  for (double v : res.checkpoint.model.lm().gates().value.storage()) g = std::max(g, std::abs(v));
  EXPECT_GT(g, 0.01);
  std::vector<double> stage;
  for (const auto& e : res.epochs)
    if (e.phase == "pretrain") stage.push_back(e.mean_loss);
  ASSERT_EQ(stage.size(), 4u);
  EXPECT_LT(stage.back(), stage.front());
}

TEST(Pipeline, DefaultDimsStageTwoIsParameterEfficient) {
  ModelConfig mc;
  mc.lm.vocab_size = kDefaultVocab;
  Model m = Model::init(mc, train_default_tokenizer(), 1);
  m.attach_lora(kDefaultLoraRank, 2);
  auto params = m.parameters();
  const std::size_t trainable = apply_stage_freeze(params, ParamGroups::instruct());
  EXPECT_LT(double(trainable), 0.1 * double(pipeline_detail::scalar_count(m, false)));
}

TEST(Examples, Shapes) {
  const Tokenizer tok = train_default_tokenizer();
  const SyntheticWorld w(EncoderSpec{});
  const auto& corpus = world().corpus;
  Example lm = lm_example(tok, corpus.lm_text.front());
  EXPECT_EQ(lm.prompt.size(), 1u);
  EXPECT_FALSE(lm.embedding);
  EXPECT_EQ(lm.target.back(), Tokenizer::kEos);
  for (const auto& r : corpus.instruct) {
    Example ex = instruction_example(tok, w, r);
    ASSERT_TRUE(ex.embedding);
    EXPECT_EQ(ex.placeholder, r.language_only());
    if (ex.placeholder) EXPECT_TRUE(ex.embedding->is_placeholder());
    EXPECT_EQ(tok.decode(ex.prompt), format_prompt(r.instruction));
  }
}

TEST(Evaluate, UniformInitPerplexityIsVocabularySize) {
  Checkpoint c;
  TrainPlan p = small_plan(Stage::pretrain);
  ModelConfig mc;
  mc.encoder = load_world(p.world);
  mc.lm = p.lm_config;
  mc.bind = {mc.encoder.embed_dim, mc.lm.dim, p.bind_hidden};
  c.model = Model::init(mc, train_default_tokenizer(), 9);
  auto rep = evaluate(c, Suite::perplexity, world().corpus.instruct);
  const double v = double(mc.lm.vocab_size);
  EXPECT_NEAR(rep["perplexity"].get<double>(), v, 0.05 * v);
  EXPECT_GT(rep["tokens"].get<std::size_t>(), 0u);
  EXPECT_EQ(rep["suite"], "perplexity");
}

TEST(Evaluate, YesNoReportAndErrors) {
  Checkpoint c = pretrained();
  std::vector<InstructionRecord> yn;
  for (const auto& r : world().corpus.instruct)
    if (!r.language_only()) yn.push_back(r);
  auto rep = evaluate(c, Suite::yesno, yn);
  EXPECT_EQ(rep["records"], yn.size());
  const double acc = rep["accuracy"].get<double>();
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(rep["correct"].get<std::size_t>(), static_cast<std::size_t>(std::llround(acc * double(yn.size()))));
  EXPECT_THROW(evaluate(c, Suite::yesno, {}), EmptyBatchError);
  std::vector<InstructionRecord> bad = {world().corpus.instruct.back()};
  EXPECT_THROW(evaluate(c, Suite::yesno, bad), IngestError);
  EXPECT_FALSE(parse_suite("bleu"));
}

TEST(Evaluate, ZeroAlphaCacheMatchesNaive) {
  Checkpoint c = pretrained();
  const SyntheticWorld w = c.model.world();
  std::vector<JointEmbedding> keys;
  for (const auto& r : world().corpus.cache_images) keys.push_back(w.encode(r.modality, r.raw, r.source_id));
  const CacheStore store = cache_build(keys);
  EvalOptions opt;
  opt.cache = &store;
  opt.enhance.alpha = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& r = world().corpus.crossmodal[i];
    EXPECT_TRUE(record_condition(c.model, w, r, opt) == record_condition(c.model, w, r, {}));
  }
}
