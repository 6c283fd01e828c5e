#include <gtest/gtest.h>

#include <cmath>

#include "mcw2v/encoder.hpp"

using namespace mcw2v;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.hidden = 8;
  c.ffn_dim = 16;
  c.conv_kernel = 3;
  c.input_dim = 12;
  c.rel_pos_dim = 4;
  return c;
}

std::vector<Tensor<double>> random_channels(std::size_t C, std::size_t T, std::size_t D, Rng& rng) {
  std::vector<Tensor<double>> out;
  for (std::size_t c = 0; c < C; ++c) out.push_back(init::normal<double>({T, D}, 1.0, rng));
  return out;
}

std::vector<ag::Var<double>> constants(ag::Graph<double>& g, const std::vector<Tensor<double>>& xs) {
  std::vector<ag::Var<double>> out;
  for (const auto& x : xs) out.push_back(g.constant(x));
  return out;
}

double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(a[i]));
  }
  return num / std::max(den, 1e-30);
}

}  // namespace

TEST(Encoder, OutputShapes) {
  Rng rng(1);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  ag::Graph<double> g(false);
  const auto out = enc.encode(constants(g, random_channels(3, 7, 12, rng)));
  EXPECT_EQ(out.fused.value().shape(), (Shape{7, 8}));
  ASSERT_EQ(out.per_channel.size(), 3u);
  for (const auto& v : out.per_channel) EXPECT_EQ(v.value().shape(), (Shape{7, 8}));
}

TEST(Encoder, FusedIsChannelAverage) {
  Rng rng(2);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  ag::Graph<double> g(false);
  const auto out = enc.encode(constants(g, random_channels(2, 6, 12, rng)));
  const auto& a = out.per_channel[0].value();
  const auto& b = out.per_channel[1].value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(out.fused.value()[i], 0.5 * (a[i] + b[i]), 1e-12);
}

TEST(Encoder, FusedOutputIsInvariantToChannelOrder) {
  Rng rng(3);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t C = 2 + trial % 3;
    auto xs = random_channels(C, 5 + trial, 12, rng);
    std::vector<std::size_t> perm(C);
    for (std::size_t c = 0; c < C; ++c) perm[c] = (c + 1 + trial) % C;
    std::vector<Tensor<double>> permuted;
    for (std::size_t c : perm) permuted.push_back(xs[c]);
    ag::Graph<double> g(false);
    const auto a = enc.encode(constants(g, xs));
    const auto b = enc.encode(constants(g, permuted));
    EXPECT_LE(max_rel_diff(a.fused.value(), b.fused.value()), 1e-5) << "trial " << trial;
    for (std::size_t c = 0; c < C; ++c)
      EXPECT_LE(max_rel_diff(a.per_channel[perm[c]].value(), b.per_channel[c].value()), 1e-5);
  }
}

TEST(Encoder, ChannelsInteractThroughCrossAttention) {
  Rng rng(4);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  auto xs = random_channels(2, 6, 12, rng);
  ag::Graph<double> g(false);
  const Tensor<double> before = enc.encode(constants(g, xs)).per_channel[0].value();
  xs[1] = init::normal<double>({6, 12}, 1.0, rng);
  const Tensor<double> after = enc.encode(constants(g, xs)).per_channel[0].value();
  EXPECT_GT(max_rel_diff(before, after), 1e-3);
}

TEST(Encoder, MaskedFramesUseTheMaskEmbedding) {
  Rng rng(5);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  auto xs = random_channels(2, 8, 12, rng);
  const std::vector<std::size_t> masked{1, 2, 6};
  ag::Graph<double> g(false);
  const auto proj = enc.input_proj(constants(g, xs), masked);
  const Tensor<double>& emb = store.at("encoder.mask_emb").value;
  for (const auto& p : proj)
    for (std::size_t t : masked)
      for (std::size_t k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(p.value()(t, k), emb[k]);

  // Masked content cannot leak: changing it leaves the output unchanged.
  const Tensor<double> a = enc.encode(constants(g, xs), masked).fused.value();
  for (auto& x : xs)
    for (std::size_t t : masked)
      for (std::size_t k = 0; k < 12; ++k) x(t, k) += 5.0;
  const Tensor<double> b = enc.encode(constants(g, xs), masked).fused.value();
  EXPECT_EQ(a, b);
}

TEST(Encoder, EmptyMaskIsPlainEncoding) {
  Rng rng(6);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  const auto xs = random_channels(2, 5, 12, rng);
  ag::Graph<double> g(false);
  const Tensor<double> plain = enc.encode(constants(g, xs)).fused.value();
  EXPECT_EQ(plain, enc.encode(constants(g, xs), {}).fused.value());
}

TEST(Encoder, ContextReachesEveryFrame) {
  Rng rng(7);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  auto xs = random_channels(2, 9, 12, rng);
  ag::Graph<double> g(false);
  const Tensor<double> a = enc.encode(constants(g, xs)).fused.value();
  for (auto& x : xs) x(8, 0) += 1.0;
  const Tensor<double> b = enc.encode(constants(g, xs)).fused.value();
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NE(a(0, k), b(0, k));
}

TEST(Encoder, Errors) {
  Rng rng(8);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  ag::Graph<double> g(false);
  try {
    enc.encode(constants(g, random_channels(1, 5, 12, rng)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingleChannel);
  }
  auto xs = random_channels(2, 5, 12, rng);
  xs[1] = init::normal<double>({4, 12}, 1.0, rng);
  EXPECT_THROW(enc.encode(constants(g, xs)), Error);
  EXPECT_THROW(enc.encode(constants(g, random_channels(2, 5, 11, rng))), Error);
  const std::vector<std::size_t> bad{5};
  EXPECT_THROW(enc.encode(constants(g, random_channels(2, 5, 12, rng)), bad), Error);

  EncoderConfig c = tiny_config();
  c.heads = 3;
  ParamStore<double> s2;
  EXPECT_THROW(MultiChannelEncoder<double>(s2, c, rng), Error);
}

TEST(Encoder, ParameterNamesArePrefixed) {
  Rng rng(9);
  ParamStore<double> store;
  MultiChannelEncoder<double> enc(store, tiny_config(), rng);
  for (std::size_t i = 0; i < store.size(); ++i) EXPECT_EQ(store[i].name.rfind("encoder.", 0), 0u) << store[i].name;
  EXPECT_TRUE(store.contains("encoder.mask_emb"));
}
