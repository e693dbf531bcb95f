#include <gtest/gtest.h>

#include "klctl/generate.hpp"

using namespace klctl;

namespace {

ModelConfig small_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.width = 16;
  c.ffn_width = 32;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.latent_dim = 4;
  c.fc_hidden = {8};
  c.n_max = 30;
  c.m_max = 4;
  return c;
}

GenerationRequest request(std::uint64_t seed, DecodeMode mode = DecodeMode::Greedy, double tau = 1.0) {
  GenerationRequest r;
  r.spec = {{7, 9, 11}, {2, 1, 0}};
  r.mode = mode;
  r.temperature = tau;
  r.seed = seed;
  r.max_length = 20;
  return r;
}

}  // namespace

TEST(Generate, DeterministicForFixedSeed) {
  Cvae<double> m(small_model(40), 1);
  EXPECT_EQ(generate(m, request(5)), generate(m, request(5)));
  const auto t = request(5, DecodeMode::Temperature, 1.0);
  EXPECT_EQ(generate(m, t), generate(m, t));
}

TEST(Generate, LengthAndTokenContract) {
  Cvae<double> m(small_model(40), 2);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto out = generate(m, request(s, DecodeMode::Temperature, 2.0));
    EXPECT_LE(out.size(), 20u);
    for (int t : out) {
      EXPECT_NE(t, kPad);
      EXPECT_NE(t, kUnk);
      EXPECT_NE(t, kCls);
      EXPECT_NE(t, kBos);
      EXPECT_NE(t, kEos);
      EXPECT_LT(t, 40);
    }
  }
}

TEST(Generate, LowTemperatureMatchesGreedy) {
  Cvae<double> m(small_model(40), 3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    EXPECT_EQ(generate(m, request(s, DecodeMode::Temperature, 1e-4)), generate(m, request(s))) << s;
  }
}

TEST(Generate, BatchingDoesNotChangeResults) {
  Cvae<double> m(small_model(40), 4);
  std::vector<KeywordSpec> specs;
  for (int i = 0; i < 7; ++i) specs.push_back({{5 + i, 20 + i}, {1 + i % 2, 2 - i % 2}});
  const auto grouped = generate_all(m, specs, 11, DecodeMode::Temperature, 1.0, 20, 3);
  const auto whole = generate_all(m, specs, 11, DecodeMode::Temperature, 1.0, 20, 64);
  EXPECT_EQ(grouped, whole);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    GenerationRequest r{specs[i], DecodeMode::Temperature, 1.0, derive_seed(11, 0x6E, i), 20};
    EXPECT_EQ(generate(m, r), whole[i]);
  }
  EXPECT_TRUE(generate_all(m, {}, 1).empty());
}

TEST(Generate, RejectsInvalidRequests) {
  Cvae<double> m(small_model(40), 1);
  auto r = request(1);
  r.max_length = 31;
  EXPECT_THROW(generate(m, r), InputError);
  r = request(1);
  r.spec.orders = {1, 3, 0};
  EXPECT_THROW(generate(m, r), InputError);
  r = request(1);
  r.spec = {{5, 6, 7, 8, 9}, {0, 0, 0, 0, 0}};
  EXPECT_THROW(generate(m, r), InputError);
  r = request(1, DecodeMode::Temperature, 0.0);
  EXPECT_THROW(generate(m, r), InputError);
  r = request(1);
  r.spec = {};
  EXPECT_THROW(generate(m, r), InputError);
}
