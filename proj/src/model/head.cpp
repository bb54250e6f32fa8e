#include "bicap/head.hpp"

#include <cmath>
#include <limits>

#include "bicap/errors.hpp"

namespace bicap {

namespace {
constexpr double kInitStd = 0.02;
}

void HeadConfig::validate() const {
  if (hidden == 0 || layers == 0 || heads == 0 || feedforward == 0 || vocab == 0 || max_positions == 0) {
    throw ConfigError("head: sizes must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("head: hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (!allow_nonstandard && (hidden % 64 != 0 || heads != hidden / 64 || feedforward != 4 * hidden)) {
    throw ConfigError("head: expected heads = hidden/64 and feedforward = 4*hidden (got H=" + std::to_string(hidden) +
                      ", A=" + std::to_string(heads) + ", F=" + std::to_string(feedforward) +
                      "); set allow_nonstandard to override");
  }
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("head: dropout must be in [0, 1)");
}

HeadConfig HeadConfig::standard(std::size_t hidden, std::size_t layers, std::size_t vocab, std::size_t max_positions) {
  HeadConfig c;
  c.hidden = hidden;
  c.layers = layers;
  c.heads = hidden / 64;
  c.feedforward = 4 * hidden;
  c.vocab = vocab;
  c.max_positions = max_positions;
  return c;
}

Tensor causal_mask(std::size_t steps, DType dtype) {
  std::vector<double> m(steps * steps, 0.0);
  for (std::size_t i = 0; i < steps; ++i)
    for (std::size_t j = i + 1; j < steps; ++j) m[i * steps + j] = -std::numeric_limits<double>::infinity();
  return Tensor::from_vector({steps, steps}, m, dtype);
}

Tensor attention_bias(const std::vector<std::size_t>& lengths, std::size_t steps, bool causal, DType dtype) {
  const std::size_t batch = lengths.size();
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> m(batch * steps * steps, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (lengths[b] == 0 || lengths[b] > steps) {
      throw DimensionError("attention_bias: length " + std::to_string(lengths[b]) + " outside [1, " +
                           std::to_string(steps) + "]");
    }
    for (std::size_t i = 0; i < steps; ++i)
      for (std::size_t j = 0; j < steps; ++j)
        if (j >= lengths[b] || (causal && j > i)) m[(b * steps + i) * steps + j] = ninf;
  }
  return Tensor::from_vector({batch, 1, steps, steps}, m, dtype);
}

std::vector<std::size_t> reversal_index(const std::vector<std::size_t>& lengths, std::size_t steps) {
  std::vector<std::size_t> index(lengths.size() * steps);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t t = 0; t < steps; ++t) index[b * steps + t] = t < lengths[b] ? lengths[b] - 1 - t : t;
  return index;
}

// ---------------------------------------------------------------------------

MultiheadAttention::MultiheadAttention(std::size_t hidden, std::size_t heads_, std::mt19937_64& rng, DType dtype)
    : q(hidden, hidden, true, kInitStd, rng, dtype),
      k(hidden, hidden, false, kInitStd, rng, dtype),
      v(hidden, hidden, true, kInitStd, rng, dtype),
      o(hidden, hidden, true, kInitStd, rng, dtype),
      heads(heads_) {}

Tensor MultiheadAttention::forward(const Tensor& query, const Tensor& memory, const Tensor& bias, Tensor* weights) const {
  if (query.rank() != 3 || memory.rank() != 3 || query.dim(0) != memory.dim(0) || query.dim(2) != memory.dim(2)) {
    throw DimensionError("attention: query " + shape_str(query.shape()) + " vs memory " + shape_str(memory.shape()));
  }
  const std::size_t batch = query.dim(0), tq = query.dim(1), tk = memory.dim(1), hidden = query.dim(2);
  const std::size_t d = hidden / heads;
  if (bias.defined()) {
    const auto& s = bias.shape();
    const bool ok = s.size() == 4 && (s[0] == 1 || s[0] == batch) && (s[1] == 1 || s[1] == heads) && s[2] == tq &&
                    s[3] == tk;
    if (!ok) {
      throw DimensionError("attention: mask " + shape_str(s) + " does not fit scores [" + std::to_string(batch) + "," +
                           std::to_string(heads) + "," + std::to_string(tq) + "," + std::to_string(tk) + "]");
    }
  }
  const Tensor qh = ops::permute(ops::reshape(q.forward(query), {batch, tq, heads, d}), {0, 2, 1, 3});
  const Tensor kh = ops::permute(ops::reshape(k.forward(memory), {batch, tk, heads, d}), {0, 2, 3, 1});
  const Tensor vh = ops::permute(ops::reshape(v.forward(memory), {batch, tk, heads, d}), {0, 2, 1, 3});
  Tensor scores = ops::scale(ops::matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(d)));
  if (bias.defined()) scores = ops::add(scores, bias);
  const Tensor att = ops::softmax(scores);
  if (weights) *weights = att.detach();
  const Tensor ctx = ops::reshape(ops::permute(ops::matmul(att, vh), {0, 2, 1, 3}), {batch, tq, hidden});
  return o.forward(ctx);
}

void MultiheadAttention::collect(const std::string& prefix, nn::ParamList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

DecoderLayer::DecoderLayer(const HeadConfig& c, std::mt19937_64& rng, DType dtype)
    : self_attn(c.hidden, c.heads, rng, dtype),
      cross_attn(c.hidden, c.heads, rng, dtype),
      ff1(c.hidden, c.feedforward, true, kInitStd, rng, dtype),
      ff2(c.feedforward, c.hidden, true, kInitStd, rng, dtype),
      ln1(c.hidden, dtype),
      ln2(c.hidden, dtype),
      ln3(c.hidden, dtype) {}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory, const Tensor& self_bias, bool training,
                             double dropout, std::mt19937_64* rng, Tensor* cross_weights) const {
  Tensor h = ln1.forward(ops::add(x, ops::dropout(self_attn.forward(x, x, self_bias), dropout, training, rng)));
  h = ln2.forward(ops::add(h, ops::dropout(cross_attn.forward(h, memory, Tensor{}, cross_weights), dropout, training, rng)));
  const Tensor ff = ff2.forward(ops::gelu(ff1.forward(h)));
  return ln3.forward(ops::add(h, ops::dropout(ff, dropout, training, rng)));
}

void DecoderLayer::collect(const std::string& prefix, nn::ParamList& out) const {
  self_attn.collect(prefix + ".self_attn", out);
  cross_attn.collect(prefix + ".cross_attn", out);
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
  ln1.collect(prefix + ".ln1", out);
  ln2.collect(prefix + ".ln2", out);
  ln3.collect(prefix + ".ln3", out);
}

// ---------------------------------------------------------------------------

TextualHead::TextualHead(const HeadConfig& config, bool bidirectional, std::mt19937_64& rng, DType dtype)
    : config_(config) {
  config_.validate();
  embedding_ = nn::make_param(Tensor::randn({config_.vocab, config_.hidden}, rng, 0.0, kInitStd, dtype));
  positions_ = nn::make_param(Tensor::randn({config_.max_positions, config_.hidden}, rng, 0.0, kInitStd, dtype));
  embed_ln_ = nn::LayerNorm(config_.hidden, dtype);
  for (std::size_t l = 0; l < config_.layers; ++l) forward_layers_.emplace_back(config_, rng, dtype);
  if (bidirectional) {
    for (std::size_t l = 0; l < config_.layers; ++l) backward_layers_.emplace_back(config_, rng, dtype);
  }
}

Tensor TextualHead::embed(std::span<const std::int64_t> ids, std::size_t batch, std::size_t steps, bool training,
                          std::mt19937_64* rng) const {
  if (ids.size() != batch * steps) throw DimensionError("embed: ids do not match [B, T]");
  if (steps > config_.max_positions) {
    throw DimensionError("embed: sequence length " + std::to_string(steps) + " exceeds positional capacity " +
                         std::to_string(config_.max_positions));
  }
  std::vector<std::int64_t> pos(steps);
  for (std::size_t t = 0; t < steps; ++t) pos[t] = static_cast<std::int64_t>(t);
  const Tensor tok = ops::embedding(embedding_, ids, {batch, steps});
  const Tensor p = ops::embedding(positions_, pos, {steps});
  return ops::dropout(embed_ln_.forward(ops::add(tok, p)), config_.dropout, training, rng);
}

Tensor TextualHead::decode_logits(Direction direction, std::span<const std::int64_t> ids, std::size_t batch,
                                  std::size_t steps, const std::vector<std::size_t>& lengths, const Tensor& visual,
                                  const DecodeOptions& options) const {
  if (lengths.size() != batch) throw DimensionError("decode_logits: lengths do not match batch");
  if (visual.rank() != 3 || visual.dim(0) != batch || visual.dim(2) != config_.hidden) {
    throw DimensionError("decode_logits: visual features " + shape_str(visual.shape()) + " do not fit batch " +
                         std::to_string(batch) + " and width " + std::to_string(config_.hidden));
  }
  if (direction == Direction::backward && !bidirectional()) {
    throw ConfigError("decode_logits: head has no backward decoder");
  }
  if (options.training && config_.dropout > 0 && options.rng == nullptr) {
    throw ParameterError("decode_logits: training with dropout needs an rng");
  }
  const auto& stack = direction == Direction::forward ? forward_layers_ : backward_layers_;
  std::vector<std::int64_t> seq(ids.begin(), ids.end());
  std::vector<std::size_t> rev;
  if (direction == Direction::backward) {
    rev = reversal_index(lengths, steps);
    for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = ids[(i / steps) * steps + rev[i]];
  }
  const Tensor bias = attention_bias(lengths, steps, options.causal, visual.dtype());
  Tensor x = embed(seq, batch, steps, options.training, options.rng);
  if (options.cross_attention) options.cross_attention->clear();
  for (const auto& layer : stack) {
    Tensor w;
    x = layer.forward(x, visual, bias, options.training, config_.dropout, options.rng,
                      options.cross_attention ? &w : nullptr);
    if (options.cross_attention) {
      if (direction == Direction::backward) w = ops::permute(ops::gather_time(ops::permute(w, {0, 2, 1, 3}), rev), {0, 2, 1, 3});
      options.cross_attention->push_back(w);
    }
  }
  Tensor logits = ops::matmul(x, ops::transpose(embedding_, 0, 1));
  if (direction == Direction::backward) logits = ops::gather_time(logits, rev);
  return logits;
}

void TextualHead::collect(const std::string& prefix, nn::ParamList& out) const {
  out.push_back({prefix + ".token_embedding", embedding_, true});
  out.push_back({prefix + ".positions", positions_, true});
  embed_ln_.collect(prefix + ".embed_ln", out);
  for (std::size_t l = 0; l < forward_layers_.size(); ++l) forward_layers_[l].collect(prefix + ".forward." + std::to_string(l), out);
  for (std::size_t l = 0; l < backward_layers_.size(); ++l) backward_layers_[l].collect(prefix + ".backward." + std::to_string(l), out);
}

}  // namespace bicap
