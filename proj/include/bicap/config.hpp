#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bicap/data.hpp"
#include "bicap/model.hpp"
#include "bicap/optim.hpp"
#include "bicap/tasks.hpp"

namespace bicap {

enum class ProbeProtocol { svm, softmax };
ProbeProtocol parse_probe_protocol(const std::string& name);
std::string probe_protocol_name(ProbeProtocol protocol);

struct DataSettings {
  std::string train_manifest;
  std::string probe_manifest;  // empty: synthetic probe set
  std::string tokenizer;
  std::size_t synth_captions = 1;  // captions per synthetic training image
  std::size_t synth_probe_count = 96;
  CaptionMode caption_mode = CaptionMode::one_random;
  bool augment = true;
  double flip_p = 0.5;
};

struct OptimSettings {
  double backbone_lr = 0.2;
  double head_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lookahead_alpha = 0.5;
  std::size_t lookahead_steps = 5;
  ScheduleConfig schedule;
  std::size_t batch_size = 32;
};

struct EvalSettings {
  std::size_t eval_period = 500;
  ProbeProtocol protocol = ProbeProtocol::svm;
};

/// Everything a run needs besides the data itself.
///
/// Text form: `[section]` headers followed by `key = value` lines; `#`
/// starts a comment. Unknown keys are errors.
struct RunConfig {
  DataSettings data;
  ModelConfig model;
  TaskOptions task;
  OptimSettings optim;
  EvalSettings eval;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;
  std::string output_dir = "run";

  // Image side and caption capacity follow the model.
  std::size_t image_size() const { return model.backbone.image_size; }
  std::size_t max_len() const { return model.head.max_positions; }

  // Throws ConfigError on any inconsistent field.
  void validate() const;
};

struct ConfigField {
  std::string section;
  std::string key;
  std::string help;
  // Where the default comes from: "published" (full-scale source setting),
  // "desk" (scaled-down), or "artifact" (implementation choice).
  std::string source;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string name() const { return section + "." + key; }
};

const std::vector<ConfigField>& config_fields();

// "section.key" -> value. Throws ConfigError.
void set_config_value(RunConfig& config, const std::string& name, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& name);

std::string config_to_text(const RunConfig& config);
RunConfig config_from_text(const std::string& text);
RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& config);

// One line per field: name, default, source, help.
std::string config_help();

// Full-scale setting: ResNet-50 backbone, H=512 L=1, 500K iterations.
RunConfig published_config();

}  // namespace bicap
