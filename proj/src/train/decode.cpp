#include "bicap/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bicap/errors.hpp"

namespace bicap {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

TokenSequence greedy_decode(const NextLogProbs& next, const DecodeLimits& limits) {
  TokenSequence seq{limits.sos};
  for (std::size_t step = 0; step < limits.max_steps; ++step) {
    const auto lp = next(seq);
    if (lp.empty()) throw DimensionError("greedy_decode: scorer returned no log-probabilities");
    const auto best = std::max_element(lp.begin(), lp.end()) - lp.begin();
    seq.push_back(best);
    if (best == limits.eos) break;
  }
  return seq;
}

std::vector<Hypothesis> beam_search(const NextLogProbs& next, std::size_t beams, const DecodeLimits& limits) {
  if (beams < 1) throw ParameterError("beam_search: beams must be at least 1");
  std::vector<Hypothesis> live{{{limits.sos}, 0.0, false}};
  std::vector<Hypothesis> done;
  for (std::size_t step = 0; step < limits.max_steps && !live.empty(); ++step) {
    const std::size_t slots = beams - done.size();
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      const auto lp = next(h.tokens);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (lp[v] == kNegInf) continue;
        Hypothesis c{h.tokens, h.score + lp[v], static_cast<std::int64_t>(v) == limits.eos};
        c.tokens.push_back(static_cast<std::int64_t>(v));
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(slots, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (candidates[i].finished) done.push_back(std::move(candidates[i]));
      else live.push_back(std::move(candidates[i]));
    }
  }
  for (auto& h : live) done.push_back(std::move(h));
  std::sort(done.begin(), done.end(), better);
  if (done.size() > beams) done.resize(beams);
  return done;
}

NextLogProbs model_scorer(const Model& model, const Tensor& image) {
  if (!model.has_head()) throw ConfigError("model_scorer: model has no textual head");
  if (image.rank() != 3) throw DimensionError("model_scorer: expected one image [3, S, S], got " + shape_str(image.shape()));
  Tensor visual;
  {
    NoGradGuard guard;
    visual = model.visual_features(ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}), false);
  }
  return [&model, visual](const TokenSequence& prefix) {
    NoGradGuard guard;
    const std::size_t T = prefix.size();
    const Tensor logits = model.head.decode_logits(Direction::forward, prefix, 1, T, {T}, visual);
    const Tensor lp = ops::log_softmax(logits);
    const std::size_t V = lp.dim(-1);
    const auto all = lp.to_vector();
    std::vector<double> out(all.end() - static_cast<std::ptrdiff_t>(V), all.end());
    for (auto id : {token_ids::pad, token_ids::sos, token_ids::mask})
      if (static_cast<std::size_t>(id) < V) out[static_cast<std::size_t>(id)] = kNegInf;
    return out;
  };
}

std::vector<double> sequence_log_probs(const NextLogProbs& next, const TokenSequence& tokens) {
  std::vector<double> out;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const TokenSequence prefix(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(t));
    const auto lp = next(prefix);
    const auto id = static_cast<std::size_t>(tokens[t]);
    if (id >= lp.size()) throw IndexError("sequence_log_probs: token " + std::to_string(id) + " outside vocabulary");
    out.push_back(lp[id]);
  }
  return out;
}

}  // namespace bicap
