#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sirenloc/model.hpp"
#include "test_util.hpp"

using namespace sirenloc;
using namespace sirenloc::nn;
using sirenloc::testing::random_input;
using sirenloc::testing::tiny_attention_config;
using sirenloc::testing::tiny_cnn_config;

TEST(ModelConfig, DefaultEmbeddingSize) {
  const ModelConfig c;
  int flen = 1 + (24000 - 1200) / 480;
  for (int i = 0; i < 2; ++i) flen = (flen - 3) / 2 + 1;
  const SirenNet net(c);
  EXPECT_EQ(net.wave_embedding_size(), 64);  // time-averaged last conv layer
  EXPECT_EQ(net.feature_embedding_size(), 32 * flen);
  EXPECT_EQ(c.feature_rows(), 8 * 53);
  EXPECT_EQ(c.feature_frames(), 48);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_cnn_config();
  c.cnn = {{4, 5000, 1}};
  EXPECT_THROW(SirenNet{c}, InvalidInput);
  c = tiny_attention_config();
  c.heads = 3;
  EXPECT_THROW(SirenNet{c}, InvalidInput);
  c = tiny_cnn_config();
  c.input_len = 1000;
  EXPECT_THROW(SirenNet{c}, InvalidInput);
}

TEST(SirenNet, InitDeterministicPerSeed) {
  ModelConfig c = tiny_cnn_config();
  const SirenNet a(c);
  EXPECT_EQ(a.init_params(), SirenNet(c).init_params());
  c.init_seed = 4;
  EXPECT_NE(a.init_params(), SirenNet(c).init_params());
}

TEST(SirenNet, ForwardDeterministic) {
  const SirenNet net(tiny_attention_config());
  const auto p = net.init_params();
  std::mt19937_64 rng(1);
  const auto in = random_input(net.config(), rng);
  const auto a = net.forward(p, in), b = net.forward(p, in);
  EXPECT_EQ(a.logit, b.logit);
  EXPECT_EQ(a.sin_raw, b.sin_raw);
  EXPECT_EQ(a.distance, b.distance);
}

TEST(SirenNet, RejectsShapeMismatch) {
  const SirenNet net(tiny_cnn_config());
  const auto p = net.init_params();
  std::mt19937_64 rng(1);
  auto in = random_input(net.config(), rng);
  in.waveform.conservativeResize(2, 2000);
  EXPECT_THROW(net.forward(p, in), InvalidInput);
  Params wrong = p;
  wrong.tensors().pop_back();
  EXPECT_THROW(net.check_params(wrong), InvalidInput);
}

TEST(SirenNet, CnnStreamPositivelyHomogeneousWithoutBias) {
  const SirenNet net(tiny_cnn_config());
  auto p = net.init_params();
  for (auto& t : p.tensors()) {
    if (t.name.rfind("wave.conv", 0) == 0 && t.shape.size() == 1) std::fill(t.values.begin(), t.values.end(), 0.0);
  }
  std::mt19937_64 rng(2);
  const auto in = random_input(net.config(), rng);
  const Vec a = net.forward_waveform_stream(p, in.waveform);
  const Vec b = net.forward_waveform_stream(p, 3.0 * in.waveform);
  ASSERT_GT(a.norm(), 0.0);
  EXPECT_LT((b - 3.0 * a).norm(), 1e-12 * b.norm());
}

TEST(SirenNet, AttentionPermutationInvariantWithoutPositions) {
  for (auto mode : {PositionalMode::concat, PositionalMode::sum}) {
    const SirenNet net(tiny_attention_config(mode));
    const auto p = net.init_params();
    std::mt19937_64 rng(3);
    const auto in = random_input(net.config(), rng);
    const Mat tokens = net.tokenize(in.waveform);
    Mat shuffled = tokens;
    std::vector<int> perm(tokens.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i = 0; i < tokens.rows(); ++i) shuffled.row(i) = tokens.row(perm[i]);
    const Vec a = net.encode_tokens(p, tokens, false), b = net.encode_tokens(p, shuffled, false);
    EXPECT_LT((a - b).norm(), 1e-10 * a.norm());
    const Vec c = net.encode_tokens(p, tokens, true), d = net.encode_tokens(p, shuffled, true);
    EXPECT_GT((c - d).norm(), 1e-6 * c.norm());
  }
}

TEST(SirenNet, TokenizePadsLastToken) {
  const SirenNet net(tiny_attention_config());
  Mat w = Mat::Ones(2, 2400);
  const Mat t = net.tokenize(w);
  ASSERT_EQ(t.rows(), 8);
  ASSERT_EQ(t.cols(), 700);
  const double g = net.config().input_gain;
  EXPECT_EQ(t(3, 2399 - 2100), g);
  EXPECT_EQ(t(3, 300), 0.0);
  EXPECT_EQ(t(7, 699), 0.0);
  EXPECT_EQ(t(4, 0), g);
}

TEST(SirenNet, HeadsAreIsolated) {
  const SirenNet net(tiny_cnn_config());
  const auto p = net.init_params();
  std::mt19937_64 rng(4);
  const auto in = random_input(net.config(), rng);
  const auto base = net.forward(p, in);
  const std::string heads[3] = {"head_siren.", "head_angle.", "head_dist."};
  for (int h = 0; h < 3; ++h) {
    Params q = p;
    for (auto& t : q.tensors()) {
      if (t.name.rfind(heads[h], 0) == 0) {
        for (double& v : t.values) v += 0.3;
      }
    }
    const auto o = net.forward(q, in);
    EXPECT_EQ(o.logit != base.logit, h == 0);
    EXPECT_EQ(o.sin_raw != base.sin_raw || o.cos_raw != base.cos_raw, h == 1);
    EXPECT_EQ(o.distance != base.distance, h == 2);
  }
}

TEST(SirenNet, HeadTensorClassification) {
  const SirenNet net(tiny_cnn_config());
  int counts[3] = {0, 0, 0};
  for (const auto& t : net.layout().tensors()) {
    const int h = SirenNet::head_of(t.name);
    EXPECT_EQ(h >= 0, SirenNet::is_head_tensor(t.name));
    if (h >= 0) ++counts[h];
  }
  for (int c : counts) EXPECT_EQ(c, 4);
}

TEST(SirenNet, DistanceAffineInRawOutput) {
  const SirenNet net(tiny_cnn_config());
  auto p = net.init_params();
  std::mt19937_64 rng(5);
  const auto in = random_input(net.config(), rng);
  auto& b2 = p.at("head_dist.fc1.bias").values;
  const double d0 = net.forward(p, in).distance;
  b2[0] += 1.0;
  EXPECT_NEAR(net.forward(p, in).distance - d0, 50.0, 1e-9);
}

TEST(AnglePair, NormalizeRoundTrip) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ang(-kPi, kPi), r(1e-6, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double th = ang(rng), rad_ = r(rng);
    const auto pr = normalize_angle_pair(rad_ * std::sin(th), rad_ * std::cos(th));
    EXPECT_FALSE(pr.degenerate);
    EXPECT_NEAR(std::hypot(pr.sin_n, pr.cos_n), 1.0, 1e-12);
    EXPECT_NEAR(std::remainder(angle_from_pair(pr.sin_n, pr.cos_n) - th, 2 * kPi), 0.0, 1e-9);
  }
}

TEST(AnglePair, DegenerateBelowThreshold) {
  const auto pr = normalize_angle_pair(3e-9, -4e-9);
  EXPECT_TRUE(pr.degenerate);
  EXPECT_EQ(pr.sin_n, 0.0);
  EXPECT_EQ(pr.cos_n, 1.0);
  EXPECT_EQ(angle_from_pair(pr.sin_n, pr.cos_n), 0.0);
  EXPECT_DOUBLE_EQ(angle_from_pair(0.0, -1.0), kPi);
}

TEST(PositionalEncoding, ClosedForm) {
  const Mat pe = positional_encoding(5, 6);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(pe(0, i), i % 2 == 0 ? 0.0 : 1.0);
  EXPECT_DOUBLE_EQ(pe(3, 0), std::sin(3.0));
  EXPECT_DOUBLE_EQ(pe(3, 3), std::cos(3.0 * std::pow(10000.0, -2.0 / 6.0)));
}

TEST(Sigmoid, StableAtExtremes) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(sigmoid(2.0) + sigmoid(-2.0), 1.0, 1e-15);
}
