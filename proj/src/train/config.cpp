#include "bicap/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "bicap/errors.hpp"

namespace bicap {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& v, const std::string& name) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v, const std::string& name) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(name + ": expected an unsigned integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v, const std::string& name) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(name + ": expected a number, got '" + v + "'");
}

bool to_bool(const std::string& v, const std::string& name) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(name + ": expected true or false, got '" + v + "'");
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  // Shortest form that round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    std::ostringstream s;
    s << std::setprecision(prec) << d;
    if (std::stod(s.str()) == d) return s.str();
  }
  return os.str();
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> to_list(const std::string& v, const std::string& name) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(trim(item), name));
  if (out.empty()) throw ConfigError(name + ": empty list");
  return out;
}

std::vector<ConfigField> make_fields() {
  std::vector<ConfigField> f;
  auto add = [&](std::string section, std::string key, std::string help, std::string source, auto get, auto set) {
    f.push_back({std::move(section), std::move(key), std::move(help), std::move(source), get, set});
  };
#define BICAP_SIZE(sec, key, member, help, src)                                                  \
  add(sec, key, help, src, [](const RunConfig& c) { return std::to_string(c.member); },           \
      [](RunConfig& c, const std::string& v) { c.member = to_size(v, std::string(sec) + "." + key); })
#define BICAP_DOUBLE(sec, key, member, help, src)                                                \
  add(sec, key, help, src, [](const RunConfig& c) { return fmt_double(c.member); },               \
      [](RunConfig& c, const std::string& v) { c.member = to_double(v, std::string(sec) + "." + key); })
#define BICAP_BOOL(sec, key, member, help, src)                                                  \
  add(sec, key, help, src, [](const RunConfig& c) { return fmt_bool(c.member); },                 \
      [](RunConfig& c, const std::string& v) { c.member = to_bool(v, std::string(sec) + "." + key); })
#define BICAP_STRING(sec, key, member, help, src)                                               \
  add(sec, key, help, src, [](const RunConfig& c) { return c.member; },                          \
      [](RunConfig& c, const std::string& v) { c.member = v; })

  BICAP_STRING("data", "train", data.train_manifest, "training manifest (JSON lines); empty uses the synthetic caption set", "artifact");
  BICAP_STRING("data", "probe", data.probe_manifest, "labeled manifest for the early-stopping probe; empty uses synthetic shapes", "artifact");
  BICAP_STRING("data", "tokenizer", data.tokenizer, "vocabulary file from tokenizer-train", "artifact");
  BICAP_SIZE("data", "synth_captions", data.synth_captions, "captions per synthetic training image (1-5)", "desk");
  BICAP_SIZE("data", "synth_probe_count", data.synth_probe_count, "images in the synthetic probe set", "desk");
  add("data", "caption_mode", "one-random or all captions per image per batch", "artifact",
      [](const RunConfig& c) { return caption_mode_name(c.data.caption_mode); },
      [](RunConfig& c, const std::string& v) { c.data.caption_mode = parse_caption_mode(v); });
  BICAP_BOOL("data", "augment", data.augment, "random crop, color jitter and caption-aware flip", "published");
  BICAP_DOUBLE("data", "flip_p", data.flip_p, "horizontal flip probability", "published");

  add("model", "task", "bicap, forward, tokclf or mlm", "published",
      [](const RunConfig& c) { return task_name(c.model.task); },
      [](RunConfig& c, const std::string& v) { c.model.task = parse_task(v); });
  add("model", "block", "basic or bottleneck residual blocks", "desk",
      [](const RunConfig& c) { return block_kind_name(c.model.backbone.block); },
      [](RunConfig& c, const std::string& v) { c.model.backbone.block = parse_block_kind(v); });
  add("model", "widths", "stage widths", "desk", [](const RunConfig& c) { return fmt_list(c.model.backbone.widths); },
      [](RunConfig& c, const std::string& v) { c.model.backbone.widths = to_list(v, "model.widths"); });
  add("model", "blocks", "blocks per stage", "desk", [](const RunConfig& c) { return fmt_list(c.model.backbone.blocks); },
      [](RunConfig& c, const std::string& v) { c.model.backbone.blocks = to_list(v, "model.blocks"); });
  BICAP_SIZE("model", "stem_width", model.backbone.stem_width, "stem channels (0: first stage width)", "desk");
  BICAP_SIZE("model", "stem_kernel", model.backbone.stem_kernel, "stem kernel size", "desk");
  BICAP_BOOL("model", "stem_pool", model.backbone.stem_pool, "max pool after the stem", "desk");
  BICAP_SIZE("model", "image_size", model.backbone.image_size, "input side S", "desk");
  BICAP_SIZE("model", "grid", model.backbone.grid, "feature grid side G", "desk");
  BICAP_SIZE("model", "hidden", model.head.hidden, "textual head width H", "desk");
  BICAP_SIZE("model", "layers", model.head.layers, "decoder layers L per direction", "published");
  BICAP_SIZE("model", "heads", model.head.heads, "attention heads A (H/64)", "published");
  BICAP_SIZE("model", "feedforward", model.head.feedforward, "feedforward width F (4H)", "published");
  BICAP_SIZE("model", "vocab", model.head.vocab, "vocabulary size V; must match the tokenizer", "desk");
  BICAP_SIZE("model", "max_positions", model.head.max_positions, "caption capacity P including boundaries", "artifact");
  BICAP_DOUBLE("model", "dropout", model.head.dropout, "dropout probability in the textual head", "artifact");
  BICAP_BOOL("model", "allow_nonstandard", model.head.allow_nonstandard, "permit A != H/64 or F != 4H", "artifact");
  add("model", "dtype", "f32 or f64", "artifact", [](const RunConfig& c) { return std::string(c.dtype == DType::f64 ? "f64" : "f32"); },
      [](RunConfig& c, const std::string& v) {
        if (v == "f32") c.dtype = DType::f32;
        else if (v == "f64") c.dtype = DType::f64;
        else throw ConfigError("model.dtype: expected f32 or f64, got '" + v + "'");
      });

  BICAP_DOUBLE("task", "mask_rate", task.mask_rate, "MLM selection probability per interior token", "published");
  add("task", "mask_forcing", "per-caption or per-batch guaranteed mask", "artifact",
      [](const RunConfig& c) { return mlm_forcing_name(c.task.forcing); },
      [](RunConfig& c, const std::string& v) { c.task.forcing = parse_mlm_forcing(v); });

  BICAP_DOUBLE("optim", "backbone_lr", optim.backbone_lr, "peak learning rate of the backbone groups", "published");
  BICAP_DOUBLE("optim", "head_lr", optim.head_lr, "peak learning rate of the head groups", "published");
  BICAP_DOUBLE("optim", "momentum", optim.momentum, "SGD momentum", "published");
  BICAP_DOUBLE("optim", "weight_decay", optim.weight_decay, "weight decay on decayed groups", "published");
  BICAP_DOUBLE("optim", "lookahead_alpha", optim.lookahead_alpha, "LookAhead interpolation factor", "published");
  BICAP_SIZE("optim", "lookahead_steps", optim.lookahead_steps, "LookAhead sync period k", "published");
  BICAP_SIZE("optim", "warmup_iters", optim.schedule.warmup_iters, "linear warmup iterations (full scale 10000)", "desk");
  BICAP_SIZE("optim", "total_iters", optim.schedule.total_iters, "training iterations (full scale 500000)", "desk");
  BICAP_SIZE("optim", "batch_size", optim.batch_size, "images per batch (full scale 256)", "desk");

  BICAP_SIZE("eval", "period", eval.eval_period, "iterations between probe evaluations", "desk");
  add("eval", "protocol", "svm or softmax early-stopping probe", "published",
      [](const RunConfig& c) { return probe_protocol_name(c.eval.protocol); },
      [](RunConfig& c, const std::string& v) { c.eval.protocol = parse_probe_protocol(v); });

  add("run", "seed", "seed for initialization, data order and augmentation", "artifact",
      [](const RunConfig& c) { return std::to_string(c.seed); },
      [](RunConfig& c, const std::string& v) { c.seed = to_u64(v, "run.seed"); });
  BICAP_STRING("run", "output", output_dir, "output directory", "artifact");
#undef BICAP_SIZE
#undef BICAP_DOUBLE
#undef BICAP_BOOL
#undef BICAP_STRING
  return f;
}

const ConfigField& find_field(const std::string& name) {
  for (const auto& f : config_fields())
    if (f.name() == name) return f;
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

ProbeProtocol parse_probe_protocol(const std::string& name) {
  if (name == "svm") return ProbeProtocol::svm;
  if (name == "softmax") return ProbeProtocol::softmax;
  throw ConfigError("unknown probe protocol '" + name + "' (expected svm or softmax)");
}

std::string probe_protocol_name(ProbeProtocol protocol) { return protocol == ProbeProtocol::svm ? "svm" : "softmax"; }

void RunConfig::validate() const {
  model.backbone.validate();
  model.head.validate();
  task.validate();
  optim.schedule.validate();
  if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be positive");
  if (eval.eval_period == 0) throw ConfigError("eval.period must be positive");
  if (model.head.max_positions < 2) throw ConfigError("model.max_positions must be at least 2");
  if (!(optim.lookahead_alpha >= 0 && optim.lookahead_alpha <= 1)) throw ConfigError("optim.lookahead_alpha must be in [0, 1]");
  if (optim.lookahead_steps == 0) throw ConfigError("optim.lookahead_steps must be positive");
  if (!(optim.momentum >= 0 && optim.momentum < 1)) throw ConfigError("optim.momentum must be in [0, 1)");
  if (!(data.flip_p >= 0 && data.flip_p <= 1)) throw ConfigError("data.flip_p must be in [0, 1]");
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = make_fields();
  return fields;
}

void set_config_value(RunConfig& config, const std::string& name, const std::string& value) {
  find_field(name).set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& name) { return find_field(name).get(config); }

std::string config_to_text(const RunConfig& config) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

RunConfig config_from_text(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside any section");
    set_config_value(config, section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str());
}

void save_config(const std::string& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write config " + path);
  out << config_to_text(config);
}

std::string config_help() {
  const RunConfig defaults;
  std::string out = "Config fields (--set section.key=value), default [source]:\n";
  for (const auto& f : config_fields()) {
    std::string v = f.get(defaults);
    if (v.empty()) v = "\"\"";
    out += "  " + f.name() + " = " + v + " [" + f.source + "]  " + f.help + "\n";
  }
  return out;
}

RunConfig published_config() {
  RunConfig c;
  c.model.backbone = BackboneConfig::resnet50();
  c.model.head = HeadConfig::standard(512, 1, 10000, 32);
  c.optim.batch_size = 256;
  c.optim.schedule = {.warmup_iters = 10000, .total_iters = 500000};
  return c;
}

}  // namespace bicap
