// bicap: tokenizer training, pretraining, captioning, attention export and
// linear probing from the command line.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "bicap/attention.hpp"
#include "bicap/checkpoint.hpp"
#include "bicap/config.hpp"
#include "bicap/decode.hpp"
#include "bicap/errors.hpp"
#include "bicap/image.hpp"
#include "bicap/probe.hpp"
#include "bicap/trainer.hpp"

namespace fs = std::filesystem;
using namespace bicap;

namespace {

enum Exit { kOk = 0, kGeneric = 1, kArgs = 2, kIngest = 3, kNumeric = 4, kMismatch = 5, kProtocol = 6 };

// Captions from a JSON-lines manifest (images are not read) or one caption
// per line of plain text.
std::vector<std::string> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open corpus " + path);
  const bool manifest = fs::path(path).extension() == ".jsonl";
  std::vector<std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!manifest) {
      out.push_back(line);
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path + ":" + std::to_string(line_no) + ": invalid JSON");
    }
    if (!j.is_object() || !j.contains("captions") || !j["captions"].is_array())
      throw SchemaError(path + ":" + std::to_string(line_no) + ": record needs a 'captions' list");
    for (const auto& c : j["captions"]) {
      if (!c.is_string()) throw SchemaError(path + ":" + std::to_string(line_no) + ": non-string caption");
      out.push_back(c.get<std::string>());
    }
  }
  return out;
}

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.file, "run configuration file ([section] key = value)");
  cmd->add_option("--set", args.sets, "override one field: section.key=value (repeatable)");
  cmd->footer(config_help());
}

RunConfig build_config(const ConfigArgs& args) {
  RunConfig c = args.file.empty() ? RunConfig{} : load_config(args.file);
  for (const auto& s : args.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
  }
  return c;
}

Tensor preprocess(const Tensor& img) { return normalize_image(img, kImageNetMean, kImageNetStd); }

// ---------------------------------------------------------------------------

int cmd_tokenizer_train(const std::string& corpus, std::size_t vocab_size, const std::string& output) {
  const Vocabulary vocab = Vocabulary::train(read_corpus(corpus), vocab_size);
  if (!output.empty() && fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  vocab.save(output);
  std::cout << "vocab_size " << vocab.size() << "\nmerges " << vocab.merges().size() << "\n";
  return kOk;
}

int cmd_train(RunConfig config, const std::string& resume) {
  std::vector<CaptionRecord> train = train_records(config);
  Vocabulary vocab;
  fs::create_directories(config.output_dir);
  if (!config.data.tokenizer.empty()) {
    vocab = Vocabulary::load(config.data.tokenizer);
  } else {
    std::vector<std::string> corpus;
    for (const auto& r : train) corpus.insert(corpus.end(), r.captions.begin(), r.captions.end());
    vocab = Vocabulary::train(corpus, config.model.head.vocab);
    if (vocab.size() != config.model.head.vocab) {
      std::cerr << "note: corpus supports " << vocab.size() << " tokens; model.vocab set to " << vocab.size() << "\n";
      config.model.head.vocab = vocab.size();
    }
    vocab.save((fs::path(config.output_dir) / "vocab.txt").string());
  }
  std::vector<CaptionRecord> probe = probe_records(config);
  save_config((fs::path(config.output_dir) / "config.txt").string(), config);

  TrainerOptions options;
  options.on_step = [](const LogRow& row) {
    if (row.probe_metric) {
      std::cout << "iter " << row.iteration << " loss " << row.loss << " probe " << *row.probe_metric << "\n";
    }
  };
  Trainer trainer(config, std::move(train), std::move(probe), std::move(vocab), options);
  if (!resume.empty()) {
    trainer.resume(load_checkpoint(resume));
    std::cout << "resumed at iteration " << trainer.iteration() << "\n";
  }
  trainer.run();
  std::cout << "done iterations " << trainer.iteration() << " best_probe " << trainer.best_metric() << " at "
            << trainer.best_iteration() << "\n";
  return kOk;
}

int cmd_caption(const std::string& ckpt_path, const std::string& image_path, std::size_t beams, std::size_t max_steps,
                const std::string& attend_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Vocabulary vocab = checkpoint_vocabulary(ckpt);
  Model model(ckpt.config.model, ckpt.config.seed, ckpt.config.dtype);
  restore_model(model, ckpt);
  if (model.task() == TaskKind::token_classification || model.task() == TaskKind::masked_lm)
    throw ProtocolError("checkpoint task " + task_name(model.task()) + " has no left-to-right caption decoder");
  const Tensor picture = image::load(image_path);
  const std::size_t S = ckpt.config.image_size();
  if (picture.rank() != 3 || picture.dim(0) != 3 || picture.dim(1) != S || picture.dim(2) != S) {
    throw MismatchError("image is " + shape_str(picture.shape()) + ", checkpoint expects [3, " + std::to_string(S) +
                        ", " + std::to_string(S) + "]");
  }
  const Tensor input = preprocess(picture);
  const std::size_t capacity = ckpt.config.max_len();
  const DecodeLimits limits{.max_steps = std::min(max_steps, capacity)};
  const auto hyps = beam_search(model_scorer(model, input), beams, limits);
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    std::cout << std::fixed << std::setprecision(4) << hyps[k].score << "\t" << vocab.decode(hyps[k].tokens) << "\n";
  }
  if (!attend_dir.empty() && !hyps.empty()) {
    const auto maps = extract_attention(model, input, hyps.front().tokens);
    const std::string id = fs::path(image_path).stem().string();
    const auto paths = write_overlays(attend_dir, id, picture, maps, vocab);
    std::cout << "tokens " << hyps.front().tokens.size() - 1 << "\noverlays " << paths.size() << "\n";
  }
  return kOk;
}

int cmd_probe(const std::string& ckpt_path, RunConfig config, const std::string& manifest, const std::string& protocol,
              const std::string& report_path) {
  if (!ckpt_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const auto data = config.data;
    const auto out = config.output_dir;
    config = ckpt.config;
    config.data.probe_manifest = data.probe_manifest;
    config.data.synth_probe_count = data.synth_probe_count;
    config.output_dir = out;
  }
  if (!manifest.empty()) config.data.probe_manifest = manifest;
  if (!protocol.empty()) config.eval.protocol = parse_probe_protocol(protocol);
  Model model(config.model, config.seed, config.dtype);
  if (!ckpt_path.empty()) restore_model(model, load_checkpoint(ckpt_path));
  else std::cerr << "note: no checkpoint, probing a randomly initialized backbone\n";
  const auto records = probe_records(config);
  const FeatureSet all = extract_features(model.backbone, records, config.image_size());
  const auto [train, test] = split_by_parity(all);
  const ProbeReport report = linear_probe(train, test, config.eval.protocol);
  const std::string text = report.to_text();
  std::cout << text;
  if (!report_path.empty()) {
    if (fs::path(report_path).has_parent_path()) fs::create_directories(fs::path(report_path).parent_path());
    std::ofstream out(report_path);
    if (!out) throw IngestError("cannot write report " + report_path);
    out << text;
  }
  return kOk;
}

int cmd_synth(const std::string& output, const std::string& kind, std::size_t count, std::size_t image_size,
              std::size_t captions, std::uint64_t seed) {
  const SynthOptions opts{.image_size = image_size, .captions_per_image = captions, .seed = seed};
  std::vector<CaptionRecord> records;
  if (kind == "captions") records = synth_caption_set(opts);
  else if (kind == "probe") records = synth_probe_set(count, opts);
  else throw ParameterError("--kind must be captions or probe");
  write_dataset(output, records);
  std::cout << "records " << records.size() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Caption-supervised visual pretraining"};
  app.require_subcommand(1);

  auto* tok = app.add_subcommand("tokenizer-train", "learn a BPE vocabulary from captions");
  std::string corpus, vocab_out;
  std::size_t vocab_size = 512;
  std::uint64_t tok_seed = 0;
  tok->add_option("--corpus", corpus, "captions: .jsonl manifest or one caption per line")->required();
  tok->add_option("--vocab-size", vocab_size, "target vocabulary size including reserved tokens")->capture_default_str();
  tok->add_option("--output,-o", vocab_out, "vocabulary file to write")->required();
  tok->add_option("--seed", tok_seed, "accepted for uniformity; BPE training is deterministic");
  tok->footer(config_help());

  auto* train = app.add_subcommand("train", "pretrain a backbone with a caption task");
  ConfigArgs train_cfg;
  add_config_options(train, train_cfg);
  std::string task, resume, train_out, tokenizer;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--task", task, "bicap, forward, tokclf or mlm");
  train->add_option("--iters", iters, "training iterations (sets optim.total_iters)");
  train->add_option("--seed", train_seed, "run seed");
  train->add_option("--output,-o", train_out, "output directory");
  train->add_option("--tokenizer", tokenizer, "vocabulary file (default: trained on the training captions)");
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* cap = app.add_subcommand("caption", "caption one image with beam search");
  std::string cap_ckpt, cap_image, attend;
  std::size_t beams = 5, max_steps = 30;
  cap->add_option("--checkpoint,-c", cap_ckpt, "checkpoint file")->required();
  cap->add_option("--image,-i", cap_image, "PNG image (or serialized tensor) at the checkpoint's image size")->required();
  cap->add_option("--beams", beams, "beam width")->capture_default_str();
  cap->add_option("--max-len", max_steps, "maximum generated tokens")->capture_default_str();
  cap->add_option("--attend", attend, "directory for per-token attention overlays");
  cap->footer(config_help());

  auto* probe = app.add_subcommand("probe", "linear probe of frozen backbone features");
  ConfigArgs probe_cfg;
  add_config_options(probe, probe_cfg);
  std::string probe_ckpt, probe_manifest, protocol, report;
  probe->add_option("--checkpoint,-c", probe_ckpt, "checkpoint (omit for a randomly initialized backbone)");
  probe->add_option("--manifest", probe_manifest, "labeled manifest (default: synthetic shapes)");
  probe->add_option("--protocol", protocol, "svm or softmax");
  probe->add_option("--report", report, "file to write the report to");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  std::string synth_out, kind = "captions";
  std::size_t count = 96, image_size = 64, captions = 1;
  std::uint64_t synth_seed = 0;
  synth->add_option("--output,-o", synth_out, "output directory")->required();
  synth->add_option("--kind", kind, "captions or probe")->capture_default_str();
  synth->add_option("--count", count, "probe images")->capture_default_str();
  synth->add_option("--image-size", image_size, "image side")->capture_default_str();
  synth->add_option("--captions", captions, "captions per image (1-5)")->capture_default_str();
  synth->add_option("--seed", synth_seed, "seed")->capture_default_str();
  synth->footer(config_help());

  auto* cfg = app.add_subcommand("config", "print the effective run configuration");
  ConfigArgs cfg_args;
  add_config_options(cfg, cfg_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kArgs;
  }

  try {
    if (tok->parsed()) return cmd_tokenizer_train(corpus, vocab_size, vocab_out);
    if (train->parsed()) {
      RunConfig c = build_config(train_cfg);
      if (!task.empty()) c.model.task = parse_task(task);
      if (train_seed) c.seed = *train_seed;
      if (!train_out.empty()) c.output_dir = train_out;
      if (!tokenizer.empty()) c.data.tokenizer = tokenizer;
      if (iters) {
        c.optim.schedule.total_iters = *iters;
        if (c.optim.schedule.warmup_iters >= *iters)
          c.optim.schedule.warmup_iters = std::max<std::size_t>(1, *iters / 10);
      }
      if (!resume.empty()) {
        // The checkpoint's configuration wins; command-line overrides still apply on top.
        const Checkpoint ckpt = load_checkpoint(resume);
        RunConfig r = ckpt.config;
        for (const auto& s : train_cfg.sets) {
          const auto eq = s.find('=');
          if (eq != std::string::npos) set_config_value(r, s.substr(0, eq), s.substr(eq + 1));
        }
        if (iters) r.optim.schedule = c.optim.schedule;
        r.output_dir = train_out.empty() ? fs::path(resume).parent_path().string() : train_out;
        if (r.output_dir.empty()) r.output_dir = ".";
        if (r.data.tokenizer.empty()) {
          const auto vocab_path = fs::path(r.output_dir) / "vocab.txt";
          checkpoint_vocabulary(ckpt).save(vocab_path.string());
          r.data.tokenizer = vocab_path.string();
        }
        c = r;
      }
      return cmd_train(c, resume);
    }
    if (cap->parsed()) return cmd_caption(cap_ckpt, cap_image, beams, max_steps, attend);
    if (probe->parsed()) return cmd_probe(probe_ckpt, build_config(probe_cfg), probe_manifest, protocol, report);
    if (synth->parsed()) return cmd_synth(synth_out, kind, count, image_size, captions, synth_seed);
    if (cfg->parsed()) {
      std::cout << config_to_text(build_config(cfg_args));
      return kOk;
    }
  } catch (const MismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMismatch;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kProtocol;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IngestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIngest;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIngest;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kArgs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGeneric;
  }
  return kGeneric;
}
