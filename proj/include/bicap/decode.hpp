#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bicap/model.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

using TokenSequence = std::vector<std::int64_t>;

// Log-probabilities over the vocabulary for the token after `prefix`.
using NextLogProbs = std::function<std::vector<double>(const TokenSequence& prefix)>;

struct DecodeLimits {
  std::size_t max_steps = 30;  // generated tokens after [SOS]
  std::int64_t sos = token_ids::sos;
  std::int64_t eos = token_ids::eos;
};

// Starts at [SOS], appends the argmax (lowest id on ties) until [EOS] or
// max_steps tokens have been generated.
TokenSequence greedy_decode(const NextLogProbs& next, const DecodeLimits& limits = {});

struct Hypothesis {
  TokenSequence tokens;  // [SOS] ... ([EOS] when finished)
  double score = 0;      // summed log-probabilities of the generated tokens
  bool finished = false;
};

/// Length-wise beam search over summed log-probabilities.
///
/// Each step keeps the best `beams` expansions of the live hypotheses; an
/// expansion ending in [EOS] retires and gives up its slot. Returns at most
/// `beams` hypotheses, best first (ties broken by token ids). Throws
/// ParameterError when beams < 1.
std::vector<Hypothesis> beam_search(const NextLogProbs& next, std::size_t beams, const DecodeLimits& limits = {});

// Forward-decoder scorer for one preprocessed image [3, S, S]. [PAD], [SOS]
// and [MASK] get probability zero.
NextLogProbs model_scorer(const Model& model, const Tensor& image);

// Per-step log-probabilities of `tokens` (which start with [SOS]) under `next`.
std::vector<double> sequence_log_probs(const NextLogProbs& next, const TokenSequence& tokens);

}  // namespace bicap
