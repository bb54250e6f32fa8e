#include "bicap/model.hpp"

#include "bicap/errors.hpp"
#include "bicap/rng.hpp"

namespace bicap {

namespace {
enum : std::uint64_t { kBackboneStream = 0x4241434b, kProjectionStream, kHeadStream, kClassifierStream };
}

TaskKind parse_task(const std::string& name) {
  if (name == "bicap") return TaskKind::bicaptioning;
  if (name == "forward") return TaskKind::forward_captioning;
  if (name == "tokclf") return TaskKind::token_classification;
  if (name == "mlm") return TaskKind::masked_lm;
  throw ConfigError("unknown task '" + name + "' (expected bicap, forward, tokclf or mlm)");
}

std::string task_name(TaskKind task) {
  switch (task) {
    case TaskKind::bicaptioning: return "bicap";
    case TaskKind::forward_captioning: return "forward";
    case TaskKind::token_classification: return "tokclf";
    case TaskKind::masked_lm: return "mlm";
  }
  return "?";
}

bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

Model::Model(const ModelConfig& config, std::uint64_t seed, DType dtype) : config_(config), dtype_(dtype) {
  config_.head.validate();
  auto backbone_rng = derive_rng(seed, {kBackboneStream});
  backbone = Backbone(config_.backbone, backbone_rng, dtype);
  const std::size_t d_i = config_.backbone.feature_width();
  if (has_head()) {
    auto proj_rng = derive_rng(seed, {kProjectionStream});
    projection = nn::Linear(d_i, config_.head.hidden, true, 0.02, proj_rng, dtype);
    auto head_rng = derive_rng(seed, {kHeadStream});
    head = TextualHead(config_.head, config_.task == TaskKind::bicaptioning, head_rng, dtype);
  } else {
    auto cls_rng = derive_rng(seed, {kClassifierStream});
    classifier = nn::Linear(d_i, config_.head.vocab, true, 0.02, cls_rng, dtype);
  }
}

Tensor Model::visual_features(const Tensor& images, bool training) const {
  if (!has_head()) throw ConfigError("visual_features: token classification model has no textual head");
  const Tensor x = images.dtype() == dtype_ ? images : images.to(dtype_);
  return projection.forward(backbone.forward_features(x, training));
}

Tensor Model::classifier_logits(const Tensor& images, bool training) const {
  if (has_head()) throw ConfigError("classifier_logits: model has a textual head");
  const Tensor x = images.dtype() == dtype_ ? images : images.to(dtype_);
  return classifier.forward(backbone.pooled_features(x, training));
}

nn::ParamList Model::parameters() const {
  nn::ParamList out;
  backbone.collect("backbone", out);
  if (has_head()) {
    projection.collect("projection", out);
    head.collect("head", out);
  } else {
    classifier.collect("classifier", out);
  }
  return out;
}

nn::BufferList Model::buffers() const {
  nn::BufferList out;
  backbone.collect_buffers("backbone", out);
  return out;
}

}  // namespace bicap
