#pragma once

#include <cstdint>
#include <string>

#include "bicap/backbone.hpp"
#include "bicap/head.hpp"

namespace bicap {

enum class TaskKind { bicaptioning, forward_captioning, token_classification, masked_lm };

// Accepts bicap, forward, tokclf, mlm.
TaskKind parse_task(const std::string& name);
std::string task_name(TaskKind task);

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
  TaskKind task = TaskKind::bicaptioning;
};

/// Backbone plus the task-specific head.
///
/// The backbone is initialized from a stream that depends only on the seed,
/// so every task starts from the same visual parameters.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed, DType dtype = DType::f32);

  // Projected grid [B, G*G, H]. Not available for token classification.
  Tensor visual_features(const Tensor& images, bool training) const;
  // Token classification logits [B, V] from pooled features.
  Tensor classifier_logits(const Tensor& images, bool training) const;

  nn::ParamList parameters() const;
  nn::BufferList buffers() const;

  const ModelConfig& config() const { return config_; }
  TaskKind task() const { return config_.task; }
  DType dtype() const { return dtype_; }
  bool has_head() const { return config_.task != TaskKind::token_classification; }

  Backbone backbone;
  nn::Linear projection;  // D_I -> H
  TextualHead head;
  nn::Linear classifier;  // D_I -> V

 private:
  ModelConfig config_;
  DType dtype_;
};

// True for parameters updated at the backbone learning rate.
bool is_backbone_param(const std::string& name);

}  // namespace bicap
