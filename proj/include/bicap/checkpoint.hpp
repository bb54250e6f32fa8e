#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "bicap/config.hpp"
#include "bicap/model.hpp"
#include "bicap/optim.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

inline constexpr char kCheckpointMagic[8] = {'B', 'C', 'A', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Complete training state.
///
/// File layout: magic, u32 version, then tagged sections (4-byte tag, u64
/// byte length, payload) in the order CONF, VOCB, PARM, BUFS, OPTM, RNGS,
/// PROG. Tensors are deep copies, so a checkpoint is a snapshot.
struct Checkpoint {
  RunConfig config;
  std::string vocabulary;  // Vocabulary::write text
  NamedTensors params;
  NamedTensors buffers;
  std::string optimizer;  // LookAhead::save_state bytes
  // Every random draw is keyed by (seed, stream, iteration), so the seed
  // and the next iteration reproduce the generator state.
  std::uint64_t rng_seed = 0;
  std::uint64_t iteration = 0;  // completed optimizer steps
  double best_metric = -std::numeric_limits<double>::infinity();
  std::uint64_t best_iteration = 0;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws IngestError on bad magic, version or truncation.
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

NamedTensors snapshot_params(const Model& model);
NamedTensors snapshot_buffers(const Model& model);
// Copies values into the model. Throws MismatchError on any name, shape or
// dtype difference.
void restore_model(const Model& model, const Checkpoint& ckpt);

// Throws MismatchError unless the two configs build the same model.
void check_compatible(const RunConfig& saved, const RunConfig& current);

Vocabulary checkpoint_vocabulary(const Checkpoint& ckpt);

}  // namespace bicap
