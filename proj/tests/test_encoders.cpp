#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bindllm/encoders.hpp"

using namespace bindllm;

namespace {

std::vector<double> random_unit(std::size_t d, CounterRng& rng) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

TEST(Modality, NamesRoundTrip) {
  for (Modality m : kEncodableModalities) EXPECT_EQ(parse_modality(modality_name(m)), m);
  EXPECT_EQ(modality_name(Modality::point_cloud), "point_cloud");
  EXPECT_FALSE(parse_modality("Image").has_value());
  EXPECT_FALSE(parse_modality("mixed").has_value());
}

TEST(Encode, UnitNormAndDeterministic) {
  SyntheticWorld world({.seed = 5});
  CounterRng rng(1);
  for (Modality m : kEncodableModalities) {
    auto raw = random_unit(32, rng);
    auto a = world.encode(m, raw, "x");
    EXPECT_NEAR(l2_norm(a.vector().data()), 1.0, 1e-9);
    EXPECT_EQ(a.modality(), m);
    EXPECT_EQ(a.source_id(), "x");
  }
  auto raw = random_unit(32, rng);
  const auto first = world.encode(Modality::audio, raw).vector();
  for (int i = 0; i < 10000; ++i) ASSERT_TRUE(world.encode(Modality::audio, raw).vector() == first);
}

TEST(Encode, SameSeedSameEncoders) {
  SyntheticWorld a({.seed = 9}), b({.seed = 9}), c({.seed = 10});
  EXPECT_TRUE(a.encoder(Modality::video).base_projection() == b.encoder(Modality::video).base_projection());
  EXPECT_FALSE(a.encoder(Modality::video).base_projection() == c.encoder(Modality::video).base_projection());
}

TEST(Encode, ZeroRawGivesNormalizedOffset) {
  SyntheticWorld world({.seed = 2});
  std::vector<double> zero(32, 0.0);
  for (Modality m : kEncodableModalities) {
    const auto& enc = world.encoder(m);
    auto e = enc.encode(zero);
    const double n = l2_norm(enc.modality_offset().data());
    EXPECT_NEAR(n, world.spec().offset_norm, 1e-12);
    for (std::size_t j = 0; j < e.dim(); ++j) EXPECT_NEAR(e.vector()[j], enc.modality_offset()[j] / n, 1e-15);
  }
}

TEST(Encode, LengthMismatchIsDimensionError) {
  SyntheticWorld world({.seed = 2});
  std::vector<double> raw(31, 0.1);
  EXPECT_THROW(world.encode(Modality::image, raw), DimensionError);
}

TEST(Encode, PairedAlignedUnpairedApart) {
  SyntheticWorld world({.seed = 17});
  CounterRng rng(18);
  double min_paired = 1.0, unpaired = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    auto z = random_unit(32, rng);
    auto z2 = random_unit(32, rng);
    auto img = world.encode(Modality::image, world.observe(Modality::image, z, rng));
    auto aud = world.encode(Modality::audio, world.observe(Modality::audio, z, rng));
    auto other = world.encode(Modality::audio, world.observe(Modality::audio, z2, rng));
    min_paired = std::min(min_paired, cosine(img.vector().data(), aud.vector().data()));
    unpaired += cosine(img.vector().data(), other.vector().data());
  }
  EXPECT_GE(min_paired, 0.9);
  EXPECT_LT(unpaired / n, 0.5);
}

TEST(Encode, ModalitiesAreNotIdentical) {
  // The per-modality offsets create the gap the cache model narrows.
  SyntheticWorld world({.seed = 17});
  CounterRng rng(3);
  auto z = random_unit(32, rng);
  auto img = world.encode(Modality::image, world.observe(Modality::image, z, rng));
  auto pc = world.encode(Modality::point_cloud, world.observe(Modality::point_cloud, z, rng));
  EXPECT_LT(cosine(img.vector().data(), pc.vector().data()), 1.0 - 1e-4);
}

TEST(Mix, SelectorReturnsFirst) {
  SyntheticWorld world({.seed = 1});
  CounterRng rng(2);
  std::vector<JointEmbedding> es{world.encode(Modality::image, random_unit(32, rng), "a"),
                                 world.encode(Modality::audio, random_unit(32, rng), "b")};
  std::vector<double> c{1.0, 0.0};
  auto m = mix(es, c);
  EXPECT_EQ(m.modality(), Modality::mixed);
  EXPECT_EQ(m.source_id(), "a+b");
  EXPECT_LE(max_abs_diff(m.vector(), es[0].vector()), 1e-15);
}

TEST(Mix, IdenticalInputsAreIdempotent) {
  SyntheticWorld world({.seed = 1});
  CounterRng rng(3);
  auto e = world.encode(Modality::text, random_unit(32, rng));
  std::vector<JointEmbedding> es{e, e};
  std::vector<double> c{0.5, 0.5};
  EXPECT_LE(max_abs_diff(mix(es, c).vector(), e.vector()), 1e-15);
}

TEST(Mix, OrthogonalPairOracle) {
  auto e1 = JointEmbedding::normalized(Tensor::row({1, 0, 0}), Modality::image, "e1");
  auto e2 = JointEmbedding::normalized(Tensor::row({0, 1, 0}), Modality::audio, "e2");
  std::vector<JointEmbedding> es{e1, e2};
  std::vector<double> c{1.0, 1.0};
  auto m = mix(es, c);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(m.vector()[0], r, 1e-15);
  EXPECT_NEAR(m.vector()[1], r, 1e-15);
  EXPECT_EQ(m.vector()[2], 0.0);
}

TEST(Mix, ScaleEquivariant) {
  SyntheticWorld world({.seed = 4});
  CounterRng rng(5);
  for (int t = 0; t < 100; ++t) {
    std::vector<JointEmbedding> es;
    std::vector<double> c, c2;
    const double lambda = 0.01 + 10.0 * rng.uniform();
    for (int i = 0; i < 3; ++i) {
      es.push_back(world.encode(kEncodableModalities[rng.below(5)], random_unit(32, rng)));
      c.push_back(rng.uniform(-1.0, 1.0));
      c2.push_back(lambda * c.back());
    }
    EXPECT_GE(cosine(mix(es, c).vector().data(), mix(es, c2).vector().data()), 1.0 - 1e-12);
  }
}

TEST(Mix, Errors) {
  auto e1 = JointEmbedding::normalized(Tensor::row({1, 0}), Modality::image, "e1");
  std::vector<JointEmbedding> es{e1, e1};
  std::vector<double> cancel{1.0, -1.0};
  EXPECT_THROW(mix(es, cancel), DegenerateMixError);
  std::vector<double> one{1.0};
  EXPECT_THROW(mix(es, one), DimensionError);
  std::vector<double> nan{1.0, std::nan("")};
  EXPECT_THROW(mix(es, nan), NumericError);
}

TEST(Placeholder, AllZeroImage) {
  auto p = placeholder_embedding(64);
  EXPECT_EQ(p.dim(), 64u);
  EXPECT_EQ(p.modality(), Modality::image);
  EXPECT_TRUE(p.is_placeholder());
  for (double v : p.vector().storage()) EXPECT_EQ(v, 0.0);
}

TEST(RawSamples, ReadsJsonlAndReportsLine) {
  const auto path = (std::filesystem::temp_directory_path() / "bindllm_raw.jsonl").string();
  {
    std::ofstream out(path);
    out << R"({"source_id": "a", "modality": "audio", "raw": [0.5, -1]})" << "\n\n";
    out << R"({"source_id": "b", "modality": "video", "raw": [1, 2]})" << "\n";
  }
  auto s = read_raw_samples(path);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].modality, Modality::audio);
  EXPECT_EQ(s[1].raw[1], 2.0);
  {
    std::ofstream out(path);
    out << R"({"source_id": "a", "modality": "audio", "raw": [0.5]})" << "\n";
    out << R"({"source_id": "b", "modality": "smell", "raw": [1]})" << "\n";
  }
  try {
    read_raw_samples(path);
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::remove(path.c_str());
}
