#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "bindllm/checkpoint.hpp"
#include "bindllm/data.hpp"

using namespace bindllm;

namespace {

ModelConfig small_config(std::size_t lora_rank = 0) {
  ModelConfig c;
  c.lm.vocab_size = kDefaultVocab;
  c.lm.dim = 16;
  c.lm.layers = 2;
  c.lm.heads = 2;
  c.lm.max_seq = 48;
  c.lm.ffn_hidden = 32;
  c.encoder.raw_dim = 6;
  c.encoder.embed_dim = 8;
  c.bind = {8, 16, 32};
  c.lora_rank = lora_rank;
  return c;
}

const Tokenizer& tokenizer() {
  static const Tokenizer tok = train_default_tokenizer();
  return tok;
}

// Every parameter drawn at random, so zero-initialized adapters and gates
// carry information through the round trip.
Checkpoint random_checkpoint(std::uint64_t seed, std::size_t lora_rank = 2) {
  Checkpoint c;
  c.model = Model::init(small_config(lora_rank), tokenizer(), seed);
  CounterRng rng(seed + 100);
  for (Parameter* p : c.model.parameters())
    for (double& v : p->value.storage()) v = rng.uniform(-0.3, 0.3);
  c.stage = "instruct";
  c.step = 1234 + seed;
  c.rng = CounterRng(seed, 77);
  c.provenance = {"lm seed=1 steps=5", "pretrain seed=1 steps=3", "instruct seed=1 steps=2"};
  return c;
}

Tensor probe_logits(Checkpoint& c) {
  const std::vector<int> tokens = tokenizer().encode("Instruction: Is it red?\nResponse: yes");
  CounterRng rng(9);
  Tensor f = Tensor::zeros(1, c.model.config().bind.joint);
  for (double& v : f.storage()) v = rng.normal();
  Tensor cond = c.model.bind().forward(f);
  return c.model.lm().logits(tokens, &cond);
}

std::string format_error(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Checkpoint a = random_checkpoint(seed);
    const auto bytes = serialize_checkpoint(a);
    Checkpoint b = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(b), bytes);
    EXPECT_TRUE(probe_logits(a) == probe_logits(b));
    EXPECT_EQ(b.stage, a.stage);
    EXPECT_EQ(b.step, a.step);
    EXPECT_EQ(b.rng.seed(), a.rng.seed());
    EXPECT_EQ(b.rng.counter(), a.rng.counter());
    EXPECT_EQ(b.provenance, a.provenance);
    EXPECT_EQ(b.model.tokenizer().to_json(), a.model.tokenizer().to_json());
    auto pa = a.model.parameters(), pb = b.model.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      EXPECT_EQ(pa[i]->name, pb[i]->name);
      EXPECT_EQ(pa[i]->group, pb[i]->group);
      EXPECT_TRUE(pa[i]->value == pb[i]->value) << pa[i]->name;
    }
  }
}

TEST(Checkpoint, FileRoundTripAndHeader) {
  Checkpoint a = random_checkpoint(4, 0);
  const auto path = (std::filesystem::temp_directory_path() / "bindllm_test_ckpt.bin").string();
  save_checkpoint(a, path);
  const auto bytes = read_file_bytes(path);
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "BNDK");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  Checkpoint b = load_checkpoint(path);
  EXPECT_TRUE(probe_logits(a) == probe_logits(b));
  EXPECT_FALSE(b.model.lm().has_lora());
  EXPECT_EQ(fnv1a(serialize_checkpoint(b)), fnv1a(bytes));
}

TEST(Checkpoint, AdapterOnlyFile) {
  Checkpoint full = random_checkpoint(5);
  const auto adapters = serialize_checkpoint(full, true);
  EXPECT_LT(adapters.size(), serialize_checkpoint(full).size() / 4);
  EXPECT_NE(format_error([&] { deserialize_checkpoint(adapters); }).find("adapter-only"), std::string::npos);

  // Same base weights, different adapters: applying the file restores them.
  Checkpoint other = deserialize_checkpoint(serialize_checkpoint(full));
  CounterRng rng(6);
  for (Parameter* p : other.model.parameters())
    if (ckpt_detail::adapter_group(p->group))
      for (double& v : p->value.storage()) v = rng.uniform(-1.0, 1.0);
  other.stage = "pretrain";
  EXPECT_FALSE(probe_logits(other) == probe_logits(full));
  apply_adapters(other, adapters);
  EXPECT_TRUE(probe_logits(other) == probe_logits(full));
  EXPECT_EQ(other.stage, full.stage);
  EXPECT_EQ(other.provenance, full.provenance);

  auto parsed = ckpt_detail::parse(adapters);
  std::size_t expected = 0;
  for (Parameter* p : full.model.parameters()) expected += ckpt_detail::adapter_group(p->group);
  EXPECT_EQ(parsed.sections.size(), expected);
  for (Parameter* p : full.model.parameters())
    EXPECT_EQ(parsed.sections.count(p->name) != 0, ckpt_detail::adapter_group(p->group)) << p->name;

  Checkpoint wrong_rank = random_checkpoint(5, 4);
  EXPECT_THROW(apply_adapters(wrong_rank, adapters), FormatError);
  EXPECT_THROW(apply_adapters(other, serialize_checkpoint(full)), FormatError);
}

TEST(Checkpoint, TruncationNamesByteOffset) {
  Checkpoint a = random_checkpoint(7, 0);
  const auto bytes = serialize_checkpoint(a);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 9, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    const std::string msg = format_error([&] { deserialize_checkpoint(part); });
    EXPECT_NE(msg.find("truncated"), std::string::npos) << cut << ": " << msg;
    EXPECT_NE(msg.find("byte offset"), std::string::npos) << cut << ": " << msg;
  }
}

TEST(Checkpoint, CorruptionIsRejected) {
  Checkpoint a = random_checkpoint(8, 0);
  const auto bytes = serialize_checkpoint(a);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_NE(format_error([&] { deserialize_checkpoint(bad_magic); }).find("bad magic at byte offset 0"),
            std::string::npos);

  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_NE(format_error([&] { deserialize_checkpoint(bad_version); }).find("version 9"), std::string::npos);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_NE(format_error([&] { deserialize_checkpoint(trailing); }).find("trailing bytes at byte offset " +
                                                                         std::to_string(bytes.size())),
            std::string::npos);

  // Locate the first section's data by walking the documented layout.
  std::uint64_t json_len = 0;
  std::memcpy(&json_len, bytes.data() + 8, 8);
  std::size_t pos = 16 + json_len + 4;
  std::uint32_t name_len = 0, ndim = 0;
  std::memcpy(&name_len, bytes.data() + pos, 4);
  pos += 4 + name_len;
  std::memcpy(&ndim, bytes.data() + pos, 4);
  pos += 4 + 8 * ndim;
  auto nan = bytes;
  const double q = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(nan.data() + pos, &q, 8);
  EXPECT_NE(format_error([&] { deserialize_checkpoint(nan); }).find("non-finite"), std::string::npos);

  auto bad_json = bytes;
  bad_json[16] = '!';
  EXPECT_NE(format_error([&] { deserialize_checkpoint(bad_json); }).find("config JSON at byte offset 16"),
            std::string::npos);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/bindllm.ckpt"), FormatError);
}

TEST(Checkpoint, Fnv1aKnownValues) {
  // Published FNV-1a 64 test vectors.
  auto h = [](const std::string& s) {
    return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  EXPECT_EQ(h(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(h("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(h("foobar"), 0x85944171f73967e8ull);
}
