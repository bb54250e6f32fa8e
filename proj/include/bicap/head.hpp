#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bicap/nn.hpp"

namespace bicap {

struct HeadConfig {
  std::size_t hidden = 128;
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t feedforward = 512;
  std::size_t vocab = 512;
  std::size_t max_positions = 32;
  double dropout = 0.1;
  // Permits heads != hidden/64 and feedforward != 4*hidden.
  bool allow_nonstandard = false;

  // Throws ConfigError.
  void validate() const;
  // heads = hidden/64, feedforward = 4*hidden.
  static HeadConfig standard(std::size_t hidden, std::size_t layers, std::size_t vocab, std::size_t max_positions);
};

enum class Direction { forward, backward };

// [T, T] additive bias: 0 where j <= i, -inf above the diagonal.
Tensor causal_mask(std::size_t steps, DType dtype = DType::f32);
// [B, 1, T, T] additive bias combining key padding (keys j >= length) and,
// optionally, the causal pattern.
Tensor attention_bias(const std::vector<std::size_t>& lengths, std::size_t steps, bool causal, DType dtype);

class MultiheadAttention {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(std::size_t hidden, std::size_t heads, std::mt19937_64& rng, DType dtype);

  // query [B, Tq, H], memory [B, Tk, H], bias broadcastable to [B, A, Tq, Tk]
  // (may be undefined). Optionally returns the attention weights [B, A, Tq, Tk].
  Tensor forward(const Tensor& query, const Tensor& memory, const Tensor& bias, Tensor* weights = nullptr) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  nn::Linear q, k, v, o;
  std::size_t heads = 1;
};

struct DecoderLayer {
  MultiheadAttention self_attn, cross_attn;
  nn::Linear ff1, ff2;
  nn::LayerNorm ln1, ln2, ln3;

  DecoderLayer() = default;
  DecoderLayer(const HeadConfig& config, std::mt19937_64& rng, DType dtype);
  // Post-norm: each sublayer is followed by dropout, residual add and layer norm.
  Tensor forward(const Tensor& x, const Tensor& memory, const Tensor& self_bias, bool training, double dropout,
                 std::mt19937_64* rng, Tensor* cross_weights) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct DecodeOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
  bool causal = true;
  // Receives the cross-attention weights [B, A, T, N] of every layer.
  std::vector<Tensor>* cross_attention = nullptr;
};

/// Transformer caption decoders over image features.
///
/// The token embedding E, positional table and embedding layer norm are
/// shared by both directions; E doubles as the output projection. The two
/// directions own disjoint layer stacks.
class TextualHead {
 public:
  TextualHead() = default;
  TextualHead(const HeadConfig& config, bool bidirectional, std::mt19937_64& rng, DType dtype = DType::f32);

  // E[ids] + Pos[0..T) -> layer norm -> dropout: [B, T, H].
  Tensor embed(std::span<const std::int64_t> ids, std::size_t batch, std::size_t steps, bool training,
               std::mt19937_64* rng) const;

  /// Logits [B, T, V] for ids [B*T] with per-row valid lengths.
  ///
  /// Forward: position t sees ids[0..t]. Backward: each row's valid prefix
  /// is reversed, run through the backward stack and the logits are
  /// reversed back, so position t sees ids[t..length).
  Tensor decode_logits(Direction direction, std::span<const std::int64_t> ids, std::size_t batch, std::size_t steps,
                       const std::vector<std::size_t>& lengths, const Tensor& visual,
                       const DecodeOptions& options = {}) const;

  void collect(const std::string& prefix, nn::ParamList& out) const;
  const HeadConfig& config() const { return config_; }
  bool bidirectional() const { return !backward_layers_.empty(); }

  const Tensor& token_embedding() const { return embedding_; }
  const Tensor& positions() const { return positions_; }
  const std::vector<DecoderLayer>& layers(Direction d) const {
    return d == Direction::forward ? forward_layers_ : backward_layers_;
  }

 private:
  HeadConfig config_;
  Tensor embedding_;  // [V, H]
  Tensor positions_;  // [P, H]
  nn::LayerNorm embed_ln_;
  std::vector<DecoderLayer> forward_layers_, backward_layers_;
};

// Per-row reversal of the valid prefix; positions past the length stay put.
std::vector<std::size_t> reversal_index(const std::vector<std::size_t>& lengths, std::size_t steps);

}  // namespace bicap
