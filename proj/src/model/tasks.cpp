#include "bicap/tasks.hpp"

#include <algorithm>
#include <set>

#include "bicap/errors.hpp"
#include "bicap/rng.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

namespace {

constexpr std::int64_t kIgnore = -100;

bool is_reserved(std::int64_t id) { return id >= 0 && id < static_cast<std::int64_t>(token_ids::num_reserved); }

Tensor select_rows(const Tensor& images, const std::vector<std::size_t>& keep) {
  const std::size_t rows = images.dim(0);
  const std::size_t inner = images.numel() / rows;
  Shape shape = images.shape();
  shape[0] = keep.size();
  return dispatch(images.dtype(), [&]<class T>() {
    auto src = images.data<T>();
    std::vector<T> out;
    out.reserve(keep.size() * inner);
    for (auto r : keep) out.insert(out.end(), src.begin() + r * inner, src.begin() + (r + 1) * inner);
    return Tensor::from_buffer<T>(shape, std::move(out));
  });
}

}  // namespace

MlmForcing parse_mlm_forcing(const std::string& name) {
  if (name == "per-caption") return MlmForcing::per_caption;
  if (name == "per-batch") return MlmForcing::per_batch;
  throw ConfigError("unknown mask forcing '" + name + "' (expected per-caption or per-batch)");
}

std::string mlm_forcing_name(MlmForcing forcing) {
  return forcing == MlmForcing::per_caption ? "per-caption" : "per-batch";
}

void TaskOptions::validate() const {
  if (!(mask_rate > 0 && mask_rate < 1)) throw ConfigError("mask rate must be in (0, 1)");
}

ShiftedBatch shift_for(const Batch& batch, Direction direction) {
  if (batch.max_len < 2) throw DimensionError("shift_for: rows need at least two tokens");
  ShiftedBatch s;
  s.steps = batch.max_len - 1;
  s.inputs.assign(batch.rows * s.steps, token_ids::pad);
  s.targets.assign(batch.rows * s.steps, kIgnore);
  for (std::size_t b = 0; b < batch.rows; ++b) {
    const std::size_t len = batch.lengths[b];
    if (len < 2) throw DimensionError("shift_for: row " + std::to_string(b) + " has fewer than two tokens");
    s.lengths.push_back(len - 1);
    for (std::size_t t = 0; t + 1 < len; ++t) {
      if (direction == Direction::forward) {
        s.inputs[b * s.steps + t] = batch.token(b, t);
        s.targets[b * s.steps + t] = batch.token(b, t + 1);
      } else {
        s.inputs[b * s.steps + t] = batch.token(b, t + 1);
        s.targets[b * s.steps + t] = batch.token(b, t);
      }
    }
  }
  return s;
}

Tensor direction_loss(const Model& model, const Tensor& visual, const Batch& batch, Direction direction,
                      const DecodeOptions& options, std::size_t* supervised) {
  const ShiftedBatch s = shift_for(batch, direction);
  const Tensor logits = model.head.decode_logits(direction, s.inputs, batch.rows, s.steps, s.lengths, visual, options);
  if (supervised) {
    *supervised = static_cast<std::size_t>(std::count_if(s.targets.begin(), s.targets.end(),
                                                         [](std::int64_t t) { return t != kIgnore; }));
  }
  return ops::cross_entropy_logits(logits, s.targets, kIgnore);
}

LossResult bicaptioning_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64* rng) {
  if (!model.head.bidirectional()) throw ConfigError("bicaptioning_loss: model has no backward decoder");
  const Tensor visual = model.visual_features(batch.images, training);
  DecodeOptions opt{.training = training, .rng = rng};
  LossResult r;
  std::size_t nf = 0, nb = 0;
  const Tensor fwd = direction_loss(model, visual, batch, Direction::forward, opt, &nf);
  const Tensor bwd = direction_loss(model, visual, batch, Direction::backward, opt, &nb);
  r.loss = ops::add(fwd, bwd);
  r.forward_term = fwd.item();
  r.backward_term = bwd.item();
  r.supervised = r.candidates = nf + nb;
  return r;
}

LossResult forward_captioning_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64* rng) {
  const Tensor visual = model.visual_features(batch.images, training);
  DecodeOptions opt{.training = training, .rng = rng};
  LossResult r;
  r.loss = direction_loss(model, visual, batch, Direction::forward, opt, &r.supervised);
  r.candidates = r.supervised;
  r.forward_term = r.loss.item();
  return r;
}

std::vector<double> khot_target(std::span<const std::int64_t> ids, std::size_t vocab) {
  std::set<std::int64_t> distinct;
  for (auto id : ids) {
    if (is_reserved(id)) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("khot_target: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
    distinct.insert(id);
  }
  if (distinct.empty()) return {};
  std::vector<double> q(vocab, 0.0);
  for (auto id : distinct) q[static_cast<std::size_t>(id)] = 1.0 / static_cast<double>(distinct.size());
  return q;
}

LossResult token_classification_loss(const Model& model, const Batch& batch, bool training) {
  const std::size_t vocab = model.config().head.vocab;
  std::vector<std::size_t> keep;
  std::vector<double> targets;
  LossResult r;
  for (std::size_t b = 0; b < batch.rows; ++b) {
    auto q = khot_target(std::span(batch.tokens).subspan(b * batch.max_len, batch.lengths[b]), vocab);
    if (q.empty()) {
      ++r.skipped;
      continue;
    }
    keep.push_back(b);
    targets.insert(targets.end(), q.begin(), q.end());
  }
  r.candidates = batch.rows;
  if (keep.empty()) throw NumericError("token_classification_loss: no row has a non-reserved token");
  const Tensor images = keep.size() == batch.rows ? batch.images : select_rows(batch.images, keep);
  const Tensor logits = model.classifier_logits(images, training);
  r.loss = ops::kl_div_logits(logits, Tensor::from_vector({keep.size(), vocab}, targets, logits.dtype()));
  r.supervised = keep.size();
  return r;
}

MlmMask sample_mlm_mask(const Batch& batch, double rate, MlmForcing forcing, std::mt19937_64& rng) {
  if (!(rate >= 0 && rate < 1)) throw ParameterError("sample_mlm_mask: rate must be in [0, 1)");
  MlmMask m;
  m.inputs = batch.tokens;
  m.targets.assign(batch.tokens.size(), kIgnore);
  auto select = [&](std::size_t pos) {
    m.targets[pos] = batch.tokens[pos];
    m.inputs[pos] = token_ids::mask;
    ++m.masked;
  };
  for (std::size_t b = 0; b < batch.rows; ++b) {
    const std::size_t len = batch.lengths[b];
    if (len < 3) continue;
    const std::size_t first = b * batch.max_len + 1, interior = len - 2;
    m.candidates += interior;
    std::size_t chosen = 0;
    for (std::size_t i = 0; i < interior; ++i) {
      if (uniform01(rng) < rate) {
        select(first + i);
        ++chosen;
      }
    }
    if (forcing == MlmForcing::per_caption && chosen == 0) select(first + uniform_index(rng, interior));
  }
  if (forcing == MlmForcing::per_batch && m.masked == 0 && m.candidates > 0) {
    std::size_t k = uniform_index(rng, m.candidates);
    for (std::size_t b = 0; b < batch.rows; ++b) {
      const std::size_t interior = batch.lengths[b] < 3 ? 0 : batch.lengths[b] - 2;
      if (k < interior) {
        select(b * batch.max_len + 1 + k);
        break;
      }
      k -= interior;
    }
  }
  return m;
}

LossResult masked_lm_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng,
                          const TaskOptions& options) {
  options.validate();
  if (model.head.bidirectional()) throw ConfigError("masked_lm_loss: expects a single-stack head");
  const MlmMask m = sample_mlm_mask(batch, options.mask_rate, options.forcing, rng);
  if (m.masked == 0) throw NumericError("masked_lm_loss: batch has no interior tokens to mask");
  const Tensor visual = model.visual_features(batch.images, training);
  DecodeOptions opt{.training = training, .rng = &rng, .causal = false};
  const Tensor logits =
      model.head.decode_logits(Direction::forward, m.inputs, batch.rows, batch.max_len, batch.lengths, visual, opt);
  LossResult r;
  r.loss = ops::cross_entropy_logits(logits, m.targets, kIgnore);
  r.supervised = m.masked;
  r.candidates = m.candidates;
  return r;
}

LossResult compute_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng,
                        const TaskOptions& options) {
  switch (model.task()) {
    case TaskKind::bicaptioning: return bicaptioning_loss(model, batch, training, &rng);
    case TaskKind::forward_captioning: return forward_captioning_loss(model, batch, training, &rng);
    case TaskKind::token_classification: return token_classification_loss(model, batch, training);
    case TaskKind::masked_lm: return masked_lm_loss(model, batch, training, rng, options);
  }
  throw ConfigError("compute_loss: unknown task");
}

}  // namespace bicap
