#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "bicap/errors.hpp"
#include "bicap/head.hpp"
#include "test_support.hpp"

using namespace bicap;
using bicap::testing::random_f64;
using bicap::testing::weighted_sum;

namespace {

HeadConfig toy_config(std::size_t vocab = 20) {
  HeadConfig c;
  c.hidden = 16;
  c.layers = 1;
  c.heads = 2;
  c.feedforward = 64;
  c.vocab = vocab;
  c.max_positions = 8;
  c.dropout = 0.0;
  c.allow_nonstandard = true;
  return c;
}

TextualHead toy_head(bool bidirectional, std::uint64_t seed = 1, HeadConfig c = toy_config()) {
  std::mt19937_64 rng(seed);
  return TextualHead(c, bidirectional, rng, DType::f64);
}

std::vector<std::int64_t> random_ids(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int64_t>(rng() % vocab);
  return ids;
}

// Logit value at [b, t, v] of a [B, T, V] tensor.
double logit_at(const std::vector<double>& l, std::size_t steps, std::size_t vocab, std::size_t b, std::size_t t,
                std::size_t v) {
  return l[(b * steps + t) * vocab + v];
}

}  // namespace

// --- configuration ---------------------------------------------------------

TEST(HeadConfig, EnforcesWidthLaw) {
  HeadConfig c = HeadConfig::standard(128, 1, 64, 32);
  EXPECT_EQ(c.heads, 2u);
  EXPECT_EQ(c.feedforward, 512u);
  EXPECT_NO_THROW(c.validate());
  c.heads = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c.allow_nonstandard = true;
  EXPECT_NO_THROW(c.validate());
  c = HeadConfig::standard(128, 1, 64, 32);
  c.feedforward = 256;
  EXPECT_THROW(c.validate(), ConfigError);
  c.allow_nonstandard = true;
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  std::mt19937_64 rng(0);
  HeadConfig bad = toy_config();
  bad.allow_nonstandard = false;
  EXPECT_THROW(TextualHead(bad, true, rng), ConfigError);
}

// --- masks -----------------------------------------------------------------

TEST(CausalMask, Patterns) {
  EXPECT_EQ(causal_mask(1).to_vector(), std::vector<double>{0.0});
  const double ninf = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(causal_mask(3, DType::f64).to_vector(), (std::vector<double>{0, ninf, ninf, 0, 0, ninf, 0, 0, 0}));
}

TEST(CausalMask, FutureWeightsAreExactlyZero) {
  Tensor scores = ops::add(random_f64({4, 4}, 3), causal_mask(4, DType::f64));
  auto w = ops::softmax(scores).to_vector();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_EQ(w[i * 4 + j], 0.0);
}

TEST(AttentionBias, CombinesPaddingAndCausality) {
  auto m = attention_bias({2, 3}, 3, true, DType::f64).to_vector();
  // Row 0 has length 2: key 2 is always masked.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(std::isinf(m[i * 3 + 2]));
  EXPECT_EQ(m[1 * 3 + 1], 0.0);
  EXPECT_TRUE(std::isinf(m[9 + 0 * 3 + 1]));
  EXPECT_EQ(m[9 + 2 * 3 + 2], 0.0);
  EXPECT_THROW(attention_bias({0}, 3, true, DType::f64), DimensionError);
}

// --- attention --------------------------------------------------------------

TEST(Attention, SingleKeyReturnsProjectedValue) {
  std::mt19937_64 rng(4);
  MultiheadAttention mha(8, 1, rng, DType::f64);
  mha.v.bias = random_f64({8}, 5);
  mha.o.bias = random_f64({8}, 6);
  Tensor q = random_f64({1, 3, 8}, 7), mem = random_f64({1, 1, 8}, 8);
  auto out = mha.forward(q, mem, Tensor{}).to_vector();
  auto expected = mha.o.forward(mha.v.forward(mem)).to_vector();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(out[t * 8 + k], expected[k], 1e-12);
}

TEST(Attention, WeightsAreDistributions) {
  std::mt19937_64 rng(9);
  MultiheadAttention mha(16, 4, rng, DType::f64);
  Tensor w;
  mha.forward(random_f64({2, 5, 16}, 10), random_f64({2, 7, 16}, 11), Tensor{}, &w);
  EXPECT_EQ(w.shape(), (Shape{2, 4, 5, 7}));
  auto v = w.to_vector();
  for (std::size_t r = 0; r < v.size() / 7; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(v[r * 7 + j], 0.0);
      s += v[r * 7 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Attention, RejectsMisshapedMask) {
  std::mt19937_64 rng(12);
  MultiheadAttention mha(16, 2, rng, DType::f64);
  Tensor x = random_f64({2, 4, 16}, 13);
  EXPECT_THROW(mha.forward(x, x, attention_bias({4, 4}, 3, true, DType::f64)), DimensionError);
  EXPECT_THROW(mha.forward(x, random_f64({2, 4, 8}, 14), Tensor{}), DimensionError);
}

TEST(Attention, ProjectionGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(15);
  MultiheadAttention mha(8, 2, rng, DType::f64);
  const Tensor x = random_f64({2, 3, 8}, 16), mem = random_f64({2, 4, 8}, 17);
  const Tensor bias = attention_bias({3, 2}, 3, true, DType::f64);
  auto f = [&](const std::vector<Tensor>& in) {
    MultiheadAttention m = mha;
    m.q.weight = in[0];
    m.k.weight = in[1];
    m.v.weight = in[2];
    m.o.weight = in[3];
    return weighted_sum(ops::add(m.forward(x, x, bias), m.forward(x, mem, Tensor{})));
  };
  std::vector<Tensor> inputs;
  for (std::uint64_t s = 0; s < 4; ++s) inputs.push_back(random_f64({8, 8}, 20 + s, 0.5));
  EXPECT_LE(ops::grad_check(f, inputs), 1e-5);
}

// --- decoder layer ------------------------------------------------------------

TEST(DecoderLayer, PreservesShape) {
  std::mt19937_64 rng(21);
  DecoderLayer layer(toy_config(), rng, DType::f64);
  for (std::size_t t : {1u, 3u, 6u}) {
    Tensor x = random_f64({2, t, 16}, 22);
    std::vector<std::size_t> lengths(2, t);
    EXPECT_EQ(layer.forward(x, random_f64({2, 4, 16}, 23), attention_bias(lengths, t, true, DType::f64), false, 0,
                            nullptr, nullptr)
                  .shape(),
              x.shape());
  }
}

TEST(DecoderLayer, ZeroedCrossOutputIgnoresImage) {
  std::mt19937_64 rng(24);
  DecoderLayer layer(toy_config(), rng, DType::f64);
  layer.cross_attn.o.weight = Tensor::zeros({16, 16}, DType::f64);
  layer.cross_attn.o.bias = Tensor::zeros({16}, DType::f64);
  Tensor x = random_f64({1, 3, 16}, 25);
  Tensor bias = attention_bias({3}, 3, true, DType::f64);
  auto a = layer.forward(x, random_f64({1, 4, 16}, 26), bias, false, 0, nullptr, nullptr).to_vector();
  auto b = layer.forward(x, random_f64({1, 4, 16}, 27), bias, false, 0, nullptr, nullptr).to_vector();
  EXPECT_EQ(a, b);
}

// --- embedding ------------------------------------------------------------------

TEST(Embed, ZeroPositionsGiveNormalizedTokenRows) {
  TextualHead head = toy_head(false);
  Tensor table = head.positions();
  auto pos = table.mutable_data<double>();
  std::fill(pos.begin(), pos.end(), 0.0);
  std::vector<std::int64_t> ids{3, 7, 3};
  auto out = head.embed(ids, 1, 3, false, nullptr).to_vector();
  auto e = head.token_embedding().to_vector();
  for (std::size_t t = 0; t < 3; ++t) {
    const double* row = &e[static_cast<std::size_t>(ids[t]) * 16];
    double mean = 0, var = 0;
    for (int k = 0; k < 16; ++k) mean += row[k] / 16;
    for (int k = 0; k < 16; ++k) var += (row[k] - mean) * (row[k] - mean) / 16;
    for (int k = 0; k < 16; ++k) EXPECT_NEAR(out[t * 16 + k], (row[k] - mean) / std::sqrt(var + 1e-5), 1e-9);
  }
  for (int k = 0; k < 16; ++k) EXPECT_EQ(out[k], out[32 + k]);
}

TEST(Embed, RejectsOverlongSequence) {
  TextualHead head = toy_head(false);
  std::vector<std::int64_t> ids(9, 5);
  EXPECT_THROW(head.embed(ids, 1, 9, false, nullptr), DimensionError);
}

TEST(Embed, GradientsReachTokensAndPositions) {
  TextualHead head = toy_head(false);
  std::vector<std::int64_t> ids{1, 2, 3, 4};
  backward(weighted_sum(head.embed(ids, 2, 2, false, nullptr)));
  ASSERT_TRUE(head.token_embedding().has_grad());
  ASSERT_TRUE(head.positions().has_grad());
  auto ge = head.token_embedding().grad().to_vector();
  auto gp = head.positions().grad().to_vector();
  EXPECT_NE(ge[2 * 16], 0.0);
  EXPECT_EQ(ge[9 * 16], 0.0);
  EXPECT_NE(gp[0], 0.0);
  EXPECT_EQ(gp[5 * 16], 0.0);
}

// --- decode_logits ----------------------------------------------------------------

TEST(DecodeLogits, ForwardIsCausal) {
  TextualHead head = toy_head(true);
  const std::size_t b = 2, t = 6, v = 20;
  auto ids = random_ids(b * t, v, 30);
  const Tensor visual = random_f64({b, 4, 16}, 31);
  const std::vector<std::size_t> lengths{6, 6};
  auto base = head.decode_logits(Direction::forward, ids, b, t, lengths, visual).to_vector();
  for (std::size_t cut = 0; cut + 1 < t; ++cut) {
    auto changed = ids;
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t s = cut + 1; s < t; ++s) changed[r * t + s] = (changed[r * t + s] + 7) % 20;
    auto out = head.decode_logits(Direction::forward, changed, b, t, lengths, visual).to_vector();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t s = 0; s <= cut; ++s)
        for (std::size_t k = 0; k < v; ++k)
          ASSERT_NEAR(logit_at(out, t, v, r, s, k), logit_at(base, t, v, r, s, k), 1e-6);
  }
}

TEST(DecodeLogits, BackwardIsAntiCausal) {
  TextualHead head = toy_head(true);
  const std::size_t b = 2, t = 6, v = 20;
  auto ids = random_ids(b * t, v, 32);
  const Tensor visual = random_f64({b, 4, 16}, 33);
  const std::vector<std::size_t> lengths{6, 4};
  auto base = head.decode_logits(Direction::backward, ids, b, t, lengths, visual).to_vector();
  for (std::size_t cut = 1; cut < t; ++cut) {
    auto changed = ids;
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t s = 0; s < cut; ++s) changed[r * t + s] = (changed[r * t + s] + 5) % 20;
    auto out = head.decode_logits(Direction::backward, changed, b, t, lengths, visual).to_vector();
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t s = cut; s < lengths[r]; ++s)
        for (std::size_t k = 0; k < v; ++k)
          ASSERT_NEAR(logit_at(out, t, v, r, s, k), logit_at(base, t, v, r, s, k), 1e-6);
  }
}

TEST(DecodeLogits, PaddingDoesNotLeakIntoValidPositions) {
  TextualHead head = toy_head(true);
  const std::size_t b = 1, t = 6, v = 20;
  auto ids = random_ids(t, v, 34);
  const Tensor visual = random_f64({b, 4, 16}, 35);
  for (Direction d : {Direction::forward, Direction::backward}) {
    auto base = head.decode_logits(d, ids, b, t, {3}, visual).to_vector();
    auto changed = ids;
    for (std::size_t s = 3; s < t; ++s) changed[s] = 0;
    auto out = head.decode_logits(d, changed, b, t, {3}, visual).to_vector();
    for (std::size_t i = 0; i < 3 * v; ++i) ASSERT_NEAR(out[i], base[i], 1e-9);
  }
}

TEST(DecodeLogits, BackwardMirrorsForwardArchitectureOnReversedIds) {
  TextualHead head = toy_head(true);
  const std::size_t b = 2, t = 5, v = 20;
  auto ids = random_ids(b * t, v, 36);
  const Tensor visual = random_f64({b, 4, 16}, 37);
  const std::vector<std::size_t> lengths{5, 3};
  auto got = head.decode_logits(Direction::backward, ids, b, t, lengths, visual).to_vector();

  // Reverse each valid prefix by hand and run the backward stack causally.
  std::vector<std::int64_t> rev(ids);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t s = 0; s < lengths[r]; ++s) rev[r * t + s] = ids[r * t + lengths[r] - 1 - s];
  Tensor x = head.embed(rev, b, t, false, nullptr);
  const Tensor bias = attention_bias(lengths, t, true, DType::f64);
  for (const auto& layer : head.layers(Direction::backward)) x = layer.forward(x, visual, bias, false, 0, nullptr, nullptr);
  auto ref = ops::matmul(x, ops::transpose(head.token_embedding(), 0, 1)).to_vector();
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t s = 0; s < lengths[r]; ++s)
      for (std::size_t k = 0; k < v; ++k)
        EXPECT_EQ(logit_at(got, t, v, r, s, k), logit_at(ref, t, v, r, lengths[r] - 1 - s, k));
}

TEST(DecodeLogits, EmbeddingIsSharedAcrossAllFourUses) {
  TextualHead head = toy_head(true);
  nn::ParamList params;
  head.collect("head", params);
  std::size_t shared = 0;
  for (const auto& p : params) shared += p.tensor.shares_storage(head.token_embedding()) ? 1 : 0;
  EXPECT_EQ(shared, 1u);
  const std::size_t b = 1, t = 4;
  auto ids = random_ids(t, 20, 38);
  const Tensor visual = random_f64({b, 4, 16}, 39);
  Tensor lf = head.decode_logits(Direction::forward, ids, b, t, {t}, visual);
  Tensor lb = head.decode_logits(Direction::backward, ids, b, t, {t}, visual);
  backward(ops::add(weighted_sum(lf, 1), weighted_sum(lb, 2)));
  // Reference gradient: the two directions separately, accumulated into the same buffer.
  auto joint = head.token_embedding().grad().to_vector();
  backward(weighted_sum(head.decode_logits(Direction::forward, ids, b, t, {t}, visual), 1));
  backward(weighted_sum(head.decode_logits(Direction::backward, ids, b, t, {t}, visual), 2), {.accumulate = true});
  auto split = head.token_embedding().grad().to_vector();
  for (std::size_t i = 0; i < joint.size(); ++i) EXPECT_NEAR(joint[i], split[i], 1e-12);
}

TEST(DecodeLogits, TiedRowMovesItsLogitThroughBothPathways) {
  const std::size_t b = 1, t = 4, v = 20, k = 11;
  const Tensor visual = random_f64({b, 4, 16}, 40);
  auto nudge = [&](TextualHead& head, double delta) {
    Tensor table = head.token_embedding();
    auto e = table.mutable_data<double>();
    for (std::size_t j = 0; j < 16; ++j) e[k * 16 + j] += delta * (j % 2 ? 1.0 : -0.5);
  };
  // Output pathway: k absent from the input only moves logit k.
  {
    TextualHead head = toy_head(false, 41);
    std::vector<std::int64_t> ids{1, 5, 6, 7};
    auto before = head.decode_logits(Direction::forward, ids, b, t, {t}, visual).to_vector();
    nudge(head, 0.1);
    auto after = head.decode_logits(Direction::forward, ids, b, t, {t}, visual).to_vector();
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t j = 0; j < v; ++j) {
        const double d = std::abs(logit_at(after, t, v, 0, s, j) - logit_at(before, t, v, 0, s, j));
        if (j == k) EXPECT_GT(d, 1e-4);
        else EXPECT_EQ(d, 0.0);
      }
  }
  // Input pathway: with k in the input, other logits move too.
  {
    TextualHead head = toy_head(false, 41);
    std::vector<std::int64_t> ids{1, static_cast<std::int64_t>(k), 6, 7};
    auto before = head.decode_logits(Direction::forward, ids, b, t, {t}, visual).to_vector();
    nudge(head, 0.1);
    auto after = head.decode_logits(Direction::forward, ids, b, t, {t}, visual).to_vector();
    EXPECT_EQ(logit_at(after, t, v, 0, 0, 3), logit_at(before, t, v, 0, 0, 3));
    EXPECT_GT(std::abs(logit_at(after, t, v, 0, 2, 3) - logit_at(before, t, v, 0, 2, 3)), 1e-6);
    EXPECT_GT(std::abs(logit_at(after, t, v, 0, 2, k) - logit_at(before, t, v, 0, 2, k)), 1e-4);
  }
}

TEST(DecodeLogits, EndToEndGradientsMatchFiniteDifferences) {
  TextualHead head = toy_head(true, 42, toy_config(12));
  const std::size_t b = 2, t = 4;
  auto ids = random_ids(b * t, 12, 43);
  const std::vector<std::size_t> lengths{4, 3};
  const Tensor visual = random_f64({b, 3, 16}, 44);
  auto total = [&](const Tensor& vis) {
    Tensor loss = weighted_sum(head.decode_logits(Direction::forward, ids, b, t, lengths, vis), 5);
    return ops::add(loss, weighted_sum(head.decode_logits(Direction::backward, ids, b, t, lengths, vis), 6));
  };
  EXPECT_LE(ops::grad_check([&](const std::vector<Tensor>& in) { return total(in[0]); }, {visual}), 1e-4);

  nn::ParamList params;
  head.collect("head", params);
  // Move away from the small-init regime where most gradients are near zero.
  std::mt19937_64 jitter(53);
  for (auto& p : params) {
    auto d = p.tensor.mutable_data<double>();
    for (auto& x : d) x += std::normal_distribution<double>(0.0, 0.3)(jitter);
  }
  backward(total(visual));
  double worst = 0;
  for (auto& p : params) {
    auto analytic = p.tensor.has_grad() ? p.tensor.grad().to_vector() : std::vector<double>(p.tensor.numel(), 0.0);
    auto d = p.tensor.mutable_data<double>();
    for (std::size_t j = 0; j < d.size(); j += 7) {
      const double orig = d[j], eps = 1e-5;
      NoGradGuard ng;
      d[j] = orig + eps;
      const double up = total(visual).item();
      d[j] = orig - eps;
      const double down = total(visual).item();
      d[j] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double err = std::abs(analytic[j] - numeric) / std::max({std::abs(analytic[j]), std::abs(numeric), 1e-6});
      worst = std::max(worst, err);
      ASSERT_LE(err, 1e-4) << p.name << "[" << j << "] analytic " << analytic[j] << " numeric " << numeric;
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(DecodeLogits, CrossAttentionCaptureIsDistributions) {
  TextualHead head = toy_head(true);
  const std::size_t b = 1, t = 5;
  auto ids = random_ids(t, 20, 45);
  std::vector<Tensor> maps;
  for (Direction d : {Direction::forward, Direction::backward}) {
    head.decode_logits(d, ids, b, t, {t}, random_f64({b, 9, 16}, 46), {.cross_attention = &maps});
    ASSERT_EQ(maps.size(), 1u);
    EXPECT_EQ(maps[0].shape(), (Shape{1, 2, 5, 9}));
    auto w = maps[0].to_vector();
    for (std::size_t r = 0; r < w.size() / 9; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += w[r * 9 + j];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(DecodeLogits, DeterministicWithoutDropoutAndDropoutNeedsRng) {
  HeadConfig c = toy_config();
  c.dropout = 0.1;
  TextualHead head = toy_head(false, 47, c);
  auto ids = random_ids(4, 20, 48);
  const Tensor visual = random_f64({1, 4, 16}, 49);
  auto a = head.decode_logits(Direction::forward, ids, 1, 4, {4}, visual).to_vector();
  auto b = head.decode_logits(Direction::forward, ids, 1, 4, {4}, visual).to_vector();
  EXPECT_EQ(a, b);
  EXPECT_THROW(head.decode_logits(Direction::forward, ids, 1, 4, {4}, visual, {.training = true}), ParameterError);
  std::mt19937_64 rng(50);
  auto c1 = head.decode_logits(Direction::forward, ids, 1, 4, {4}, visual, {.training = true, .rng = &rng}).to_vector();
  EXPECT_NE(c1, a);
}

TEST(DecodeLogits, ForwardOnlyHeadRejectsBackward) {
  TextualHead head = toy_head(false);
  auto ids = random_ids(4, 20, 51);
  EXPECT_THROW(head.decode_logits(Direction::backward, ids, 1, 4, {4}, random_f64({1, 4, 16}, 52)), ConfigError);
  EXPECT_THROW(head.decode_logits(Direction::forward, ids, 1, 4, {4}, random_f64({1, 4, 8}, 52)), DimensionError);
}
