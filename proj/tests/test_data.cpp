#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bindllm/checkpoint.hpp"
#include "bindllm/data.hpp"

using namespace bindllm;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("bindllm_test_data_" + name)).string();
}

std::string write_text(const std::string& name, const std::string& text) {
  const auto p = temp_path(name);
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

std::string file_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string caption_line(const std::string& id, const std::string& caption = "a red star that spins") {
  return R"({"source_id":")" + id + R"(","modality":"image","raw":[0.5,-1.0],"caption":")" + caption + "\"}\n";
}

CorpusSpec small_spec(std::uint64_t seed) {
  CorpusSpec s;
  s.seed = seed;
  s.cache_entries = 1000;
  return s;
}

}  // namespace

TEST(Ingest, ReadsWellFormedCaptions) {
  auto p = write_text("ok.jsonl", caption_line("a") + "\n" + caption_line("b", "a blue circle that glows"));
  auto got = ingest_captions(p);
  ASSERT_EQ(got.records.size(), 2u);
  EXPECT_TRUE(got.warnings.empty());
  EXPECT_EQ(got.records[1].source_id, "b");
  EXPECT_EQ(got.records[1].caption, "a blue circle that glows");
  EXPECT_EQ(got.records[0].raw, (std::vector<double>{0.5, -1.0}));
}

TEST(Ingest, MalformedLineNamesItsLineNumber) {
  auto p = write_text("bad.jsonl", caption_line("a") + "{not json\n" + caption_line("c"));
  try {
    ingest_captions(p);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2:"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("line 1:"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("line 3:"), std::string::npos) << msg;
  }
}

TEST(Ingest, ReportsAtMostTwentyOffenders) {
  std::string text;
  for (int i = 0; i < 30; ++i) text += R"({"source_id":"x)" + std::to_string(i) + "\"}\n";
  auto p = write_text("many.jsonl", text);
  try {
    ingest_captions(p);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    std::size_t lines = 0;
    for (std::size_t pos = 0; (pos = msg.find("\n  line ", pos)) != std::string::npos; ++pos) ++lines;
    EXPECT_EQ(lines, kMaxReportedOffenders);
    EXPECT_NE(msg.find("line 20:"), std::string::npos);
    EXPECT_EQ(msg.find("line 21:"), std::string::npos);
    EXPECT_NE(msg.find("30 malformed"), std::string::npos);
    EXPECT_NE(msg.find("10 more"), std::string::npos);
  }
}

TEST(Ingest, FieldErrors) {
  const std::vector<std::string> bad = {
      R"({"source_id":"a","modality":"image","raw":[1],"caption":""})",
      R"({"source_id":"a","modality":"smell","raw":[1],"caption":"x"})",
      R"({"source_id":"a","modality":"image","raw":[],"caption":"x"})",
      R"({"source_id":"a","modality":"image","raw":["q"],"caption":"x"})",
      R"({"source_id":7,"modality":"image","raw":[1],"caption":"x"})",
      R"([1,2,3])",
  };
  for (const auto& line : bad) {
    auto p = write_text("field.jsonl", line + "\n");
    EXPECT_THROW(ingest_captions(p), IngestError) << line;
  }
}

TEST(Ingest, DuplicateSourceIdsAreRejected) {
  auto p = write_text("dup.jsonl", caption_line("a") + caption_line("b") + caption_line("a"));
  try {
    ingest_captions(p);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3: duplicate source_id \"a\""), std::string::npos) << e.what();
  }
}

TEST(Ingest, EmptyFileWarns) {
  auto p = write_text("empty.jsonl", "\n  \n");
  auto got = ingest_captions(p);
  EXPECT_TRUE(got.records.empty());
  ASSERT_EQ(got.warnings.size(), 1u);
  EXPECT_NE(got.warnings[0].find("no records"), std::string::npos);
  EXPECT_THROW(ingest_captions(temp_path("does_not_exist.jsonl")), IngestError);
}

TEST(Ingest, InstructionVisualFieldsAllOrNothing) {
  auto ok = write_text("ins.jsonl",
                       R"({"instruction":"Repeat the word red.","response":"red"})"
                       "\n"
                       R"({"instruction":"Is it red?","response":"yes","source_id":"i","modality":"image","raw":[1,2]})"
                       "\n");
  auto got = ingest_instructions(ok);
  ASSERT_EQ(got.records.size(), 2u);
  EXPECT_TRUE(got.records[0].language_only());
  EXPECT_FALSE(got.records[1].language_only());
  EXPECT_EQ(*got.records[1].modality, Modality::image);
  auto bad = write_text("ins_bad.jsonl", R"({"instruction":"Is it red?","response":"yes","source_id":"i"})" "\n");
  EXPECT_THROW(ingest_instructions(bad), IngestError);
}

TEST(Ingest, JsonlRoundTrip) {
  auto corpus = generate_corpus(small_spec(3));
  const auto p = temp_path("rt.jsonl");
  write_jsonl(p, corpus.instruct);
  auto back = ingest_instructions(p).records;
  ASSERT_EQ(back.size(), corpus.instruct.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].instruction, corpus.instruct[i].instruction);
    EXPECT_EQ(back[i].response, corpus.instruct[i].response);
    EXPECT_EQ(back[i].source_id, corpus.instruct[i].source_id);
    EXPECT_EQ(back[i].raw, corpus.instruct[i].raw);  // doubles print round-trip exact
  }
}

TEST(Prompts, Templates) {
  EXPECT_EQ(format_prompt("Is it red?"), "Instruction: Is it red?\nResponse:");
  EXPECT_EQ(yesno_instruction("Is it red?"), "Is it red? Please answer yes or no.");
  EXPECT_EQ(yesno_instruction(yesno_instruction("Is it red?")), "Is it red? Please answer yes or no.");
  EXPECT_EQ(format_response("yes"), " yes");
}

TEST(Generator, FixedSeedIsChecksumStable) {
  const auto a = temp_path("gen_a.jsonl"), b = temp_path("gen_b.jsonl");
  auto ca = generate_corpus(small_spec(9));
  auto cb = generate_corpus(small_spec(9));
  ASSERT_EQ(ca.cache_images.size(), 1000u);
  write_jsonl(a, ca.cache_images);
  write_jsonl(b, cb.cache_images);
  const std::string ta = file_text(a), tb = file_text(b);
  auto bytes = [](const std::string& s) { return std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()); };
  EXPECT_EQ(fnv1a(bytes(ta)), fnv1a(bytes(tb)));
  EXPECT_EQ(ta, tb);
  auto cc = generate_corpus(small_spec(10));
  write_jsonl(b, cc.cache_images);
  EXPECT_NE(file_text(b), ta);
}

TEST(Generator, CorpusShape) {
  auto c = generate_corpus(CorpusSpec{});
  EXPECT_EQ(c.captions.size(), 32u);
  EXPECT_EQ(c.hq.size(), 32u);
  EXPECT_EQ(c.instruct.size(), 64u + 8u);
  EXPECT_EQ(c.crossmodal.size(), 64u);
  EXPECT_EQ(c.cache_images.size(), 4096u);
  std::set<std::string> ids, captions;
  for (const auto& r : c.captions) {
    ids.insert(r.source_id);
    captions.insert(r.caption);
    EXPECT_EQ(r.raw.size(), CorpusSpec{}.encoder.raw_dim);
  }
  EXPECT_EQ(ids.size(), 32u);
  EXPECT_EQ(captions.size(), 32u);  // distinct attribute combinations
  std::size_t yes = 0, lang = 0;
  for (const auto& r : c.instruct) {
    if (r.language_only()) {
      ++lang;
      continue;
    }
    EXPECT_TRUE(r.response == "yes" || r.response == "no");
    EXPECT_TRUE(r.instruction.ends_with(kYesNoSuffix));
    yes += r.response == "yes";
  }
  EXPECT_EQ(lang, 8u);
  EXPECT_EQ(yes, 32u);
  for (const auto& r : c.crossmodal) EXPECT_EQ(*r.modality, Modality::audio);
}

TEST(Generator, AnswersMatchAttributes) {
  // Re-derive every label from the caption text of the image it refers to.
  auto c = generate_corpus(CorpusSpec{});
  std::map<std::string, std::string> caption_of;
  for (const auto& r : c.captions) caption_of[r.source_id] = r.caption;
  auto check = [&](const InstructionRecord& r, const std::string& img) {
    const std::string& cap = caption_of.at(img);
    std::string q = r.instruction.substr(0, r.instruction.size() - kYesNoSuffix.size());
    std::string word;
    if (q.starts_with("Is it a ")) word = " " + q.substr(8, q.size() - 9) + " ";
    else if (q.starts_with("Is it ")) word = " " + q.substr(6, q.size() - 7) + " ";
    else word = " " + q.substr(8, q.size() - 9) + "s";
    const bool has = (cap + " ").find(word) != std::string::npos;
    EXPECT_EQ(r.response, has ? "yes" : "no") << r.instruction << " / " << cap;
  };
  for (const auto& r : c.instruct)
    if (!r.language_only()) check(r, *r.source_id);
  for (const auto& r : c.crossmodal) check(r, "img-" + r.source_id->substr(4));
}

TEST(Tokenizer, CheckedInVocabularyReproduces) {
  const std::string path = std::string(BINDLLM_SOURCE_DIR) + "/data/vocab.bpe";
  const Tokenizer shipped = Tokenizer::load(path);
  const Tokenizer fresh = train_default_tokenizer();
  const auto p = temp_path("vocab.bpe");
  fresh.save(p);
  EXPECT_EQ(file_text(p), file_text(path));
  EXPECT_EQ(shipped.vocab_size(), kDefaultVocab);
  EXPECT_EQ(fresh.to_json(), shipped.to_json());
}

TEST(Tokenizer, CorpusRoundTripsAndCompresses) {
  const Tokenizer tok = train_default_tokenizer();
  auto corpus = generate_corpus(CorpusSpec{});
  std::size_t bytes = 0, tokens = 0;
  for (const auto& text : tokenizer_corpus(corpus)) {
    auto ids = tok.encode(text);
    EXPECT_EQ(tok.decode(ids), text);
    for (int id : ids) {
      EXPECT_GE(id, 0);
      EXPECT_LT(id, int(kDefaultVocab));
      EXPECT_NE(id, Tokenizer::kEos);
    }
    bytes += text.size();
    tokens += ids.size();
  }
  EXPECT_LT(double(tokens) / double(bytes), 0.25);
  // Answers start with a single token each.
  EXPECT_EQ(tok.encode(format_response("yes")).size(), 1u);
  EXPECT_EQ(tok.encode(format_response("no")).size(), 1u);
}
