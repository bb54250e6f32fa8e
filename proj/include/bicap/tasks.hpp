#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bicap/data.hpp"
#include "bicap/model.hpp"

namespace bicap {

// How MLM guarantees that masking supervises something.
enum class MlmForcing {
  per_caption,  // every caption with interior tokens gets at least one mask
  per_batch,    // only a batch with no selection at all gets one forced mask
};
MlmForcing parse_mlm_forcing(const std::string& name);
std::string mlm_forcing_name(MlmForcing forcing);

struct TaskOptions {
  double mask_rate = 0.15;
  MlmForcing forcing = MlmForcing::per_caption;

  // Throws ConfigError unless mask_rate is in (0, 1).
  void validate() const;
};

struct LossResult {
  Tensor loss;
  double forward_term = 0;   // captioning tasks
  double backward_term = 0;  // bicaptioning only
  std::size_t supervised = 0;  // loss-contributing positions (or rows for tokclf)
  std::size_t candidates = 0;  // positions eligible for supervision
  std::size_t skipped = 0;     // tokclf rows without usable tokens
};

// Teacher-forced inputs and targets of one direction, each [B, L-1].
// Forward predicts s[t+1] from s[0..t]; backward predicts s[t] from s[t+1..).
struct ShiftedBatch {
  std::vector<std::int64_t> inputs;
  std::vector<std::int64_t> targets;  // -100 where ignored
  std::vector<std::size_t> lengths;
  std::size_t steps = 0;
};
ShiftedBatch shift_for(const Batch& batch, Direction direction);

// Mean cross-entropy of one direction given precomputed visual features.
Tensor direction_loss(const Model& model, const Tensor& visual, const Batch& batch, Direction direction,
                      const DecodeOptions& options, std::size_t* supervised = nullptr);

LossResult bicaptioning_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64* rng);
LossResult forward_captioning_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64* rng);

// K-hot target with 1/K on the distinct non-reserved ids; empty if K = 0.
std::vector<double> khot_target(std::span<const std::int64_t> ids, std::size_t vocab);
LossResult token_classification_loss(const Model& model, const Batch& batch, bool training);

struct MlmMask {
  std::vector<std::int64_t> inputs;   // [B, L] with [MASK] substituted
  std::vector<std::int64_t> targets;  // [B, L], original id at masked positions, -100 elsewhere
  std::size_t masked = 0;
  std::size_t candidates = 0;  // interior tokens
};
// Each interior token (between [SOS] and [EOS]) is selected independently.
MlmMask sample_mlm_mask(const Batch& batch, double rate, MlmForcing forcing, std::mt19937_64& rng);
LossResult masked_lm_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng,
                          const TaskOptions& options = {});

// Dispatches on the model's task.
LossResult compute_loss(const Model& model, const Batch& batch, bool training, std::mt19937_64& rng,
                        const TaskOptions& options = {});

}  // namespace bicap
