#include "bicap/trainer.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "bicap/errors.hpp"
#include "bicap/rng.hpp"

namespace bicap {

namespace {

constexpr std::uint64_t kStepStream = 0x53544550;  // per-step dropout and masking

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::filesystem::path out_path(const RunConfig& config, const char* name) {
  return std::filesystem::path(config.output_dir) / name;
}

}  // namespace

std::string log_header() { return "iter,loss,lr_backbone,lr_head,probe_metric"; }

std::string log_line(const LogRow& row) {
  std::string s = std::to_string(row.iteration) + "," + fmt(row.loss) + "," + fmt(row.lr_backbone) + "," +
                  fmt(row.lr_head) + ",";
  if (row.probe_metric) s += fmt(*row.probe_metric);
  return s;
}

LoaderConfig loader_config(const RunConfig& config) {
  LoaderConfig lc;
  lc.batch_size = config.optim.batch_size;
  lc.image_size = config.image_size();
  lc.max_len = config.max_len();
  lc.caption_mode = config.data.caption_mode;
  lc.augment = config.data.augment;
  lc.flip_p = config.data.flip_p;
  lc.seed = config.seed;
  return lc;
}

std::vector<CaptionRecord> probe_records(const RunConfig& config) {
  if (!config.data.probe_manifest.empty()) {
    return load_manifest(config.data.probe_manifest, {.require_captions = false, .require_labels = true});
  }
  return synth_probe_set(config.data.synth_probe_count, {.image_size = config.image_size(), .seed = config.seed});
}

std::vector<CaptionRecord> train_records(const RunConfig& config) {
  if (!config.data.train_manifest.empty()) return load_manifest(config.data.train_manifest);
  return synth_caption_set(
      {.image_size = config.image_size(), .captions_per_image = config.data.synth_captions, .seed = config.seed});
}

Trainer::Trainer(RunConfig config, std::vector<CaptionRecord> train, std::vector<CaptionRecord> probe, Vocabulary vocab,
                 TrainerOptions options)
    : config_(std::move(config)),
      train_(std::move(train)),
      probe_(std::move(probe)),
      vocab_(std::move(vocab)),
      options_(std::move(options)) {
  config_.validate();
  if (vocab_.size() != config_.model.head.vocab) {
    throw ConfigError("vocabulary has " + std::to_string(vocab_.size()) + " tokens, model.vocab is " +
                      std::to_string(config_.model.head.vocab));
  }
  if (train_.empty()) throw IngestError("training set is empty");
  loader_ = std::make_unique<DataLoader>(train_, vocab_, loader_config(config_));
  model_ = std::make_unique<Model>(config_.model, config_.seed, config_.dtype);
  auto groups = build_param_groups(model_->parameters(), config_.optim.backbone_lr, config_.optim.head_lr,
                                   config_.optim.weight_decay);
  optimizer_ = std::make_unique<LookAhead>(Sgd(std::move(groups), config_.optim.momentum),
                                           config_.optim.lookahead_alpha, config_.optim.lookahead_steps);
}

void Trainer::resume(const Checkpoint& ckpt) {
  check_compatible(ckpt.config, config_);
  if (ckpt.iteration > config_.optim.schedule.total_iters) {
    throw MismatchError("checkpoint is at iteration " + std::to_string(ckpt.iteration) + ", beyond total_iters " +
                        std::to_string(config_.optim.schedule.total_iters));
  }
  if (ckpt.rng_seed != config_.seed) {
    throw MismatchError("checkpoint seed " + std::to_string(ckpt.rng_seed) + " differs from run seed " +
                        std::to_string(config_.seed));
  }
  if (!(checkpoint_vocabulary(ckpt) == vocab_)) throw MismatchError("checkpoint vocabulary differs from the run's");
  restore_model(*model_, ckpt);
  std::istringstream state(ckpt.optimizer);
  optimizer_->load_state(state);
  iteration_ = ckpt.iteration;
  best_metric_ = ckpt.best_metric;
  best_iteration_ = ckpt.best_iteration;
}

LogRow Trainer::step() {
  const auto& schedule = config_.optim.schedule;
  if (iteration_ >= schedule.total_iters) throw StateError("trainer: all iterations are complete");
  const Batch batch = loader_->batch_at(iteration_);
  auto rng = derive_rng(config_.seed, {kStepStream, iteration_});
  const double lr_b = lr_at(schedule, config_.optim.backbone_lr, iteration_);
  const double lr_h = lr_at(schedule, config_.optim.head_lr, iteration_);

  auto fail = [&](double loss, const std::string& why) {
    write_nan_dump(batch, loss);
    std::string ids;
    for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
    throw NumericError("non-finite " + why + " at iteration " + std::to_string(iteration_) + " on batch [" + ids + "]");
  };
  LossResult result;
  try {
    result = compute_loss(*model_, batch, true, rng, config_.task);
  } catch (const NumericError& e) {
    fail(std::numeric_limits<double>::quiet_NaN(), std::string("activation (") + e.what() + ")");
  }
  const double loss = result.loss.item();
  if (!std::isfinite(loss)) fail(loss, "loss");
  try {
    backward(result.loss);
  } catch (const NumericError& e) {
    fail(loss, std::string("gradient (") + e.what() + ")");
  }
  const std::array<double, 4> lrs{lr_b, lr_b, lr_h, lr_h};
  optimizer_->step(lrs);
  optimizer_->clear_grads();
  ++iteration_;

  LogRow row;
  row.iteration = iteration_;
  row.loss = loss;
  row.lr_backbone = lr_b;
  row.lr_head = lr_h;
  row.supervised = result.supervised;
  row.candidates = result.candidates;
  row.rows = batch.rows;
  return row;
}

double Trainer::evaluate_probe() const {
  const FeatureSet all = extract_features(model_->backbone, probe_, config_.image_size());
  const auto [train, test] = split_by_parity(all);
  return linear_probe(train, test, config_.eval.protocol).metric;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  // Locations are not part of the run's state; the vocabulary travels inside.
  c.config.output_dir = RunConfig{}.output_dir;
  c.config.data.tokenizer.clear();
  std::ostringstream vocab;
  vocab_.write(vocab);
  c.vocabulary = vocab.str();
  c.params = snapshot_params(*model_);
  c.buffers = snapshot_buffers(*model_);
  std::ostringstream state;
  optimizer_->save_state(state);
  c.optimizer = state.str();
  c.rng_seed = config_.seed;
  c.iteration = iteration_;
  c.best_metric = best_metric_;
  c.best_iteration = best_iteration_;
  return c;
}

void Trainer::run(std::optional<std::size_t> until) {
  const std::size_t total = config_.optim.schedule.total_iters;
  const std::size_t stop = std::min(until.value_or(total), total);
  if (options_.write_files) {
    std::filesystem::create_directories(config_.output_dir);
    const auto csv = out_path(config_, "train.csv");
    if (iteration_ == 0 || !std::filesystem::exists(csv)) {
      std::ofstream out(csv, std::ios::trunc);
      out << log_header() << "\n";
    }
  }
  while (iteration_ < stop) {
    LogRow row = step();
    const bool eval = iteration_ % config_.eval.eval_period == 0 || iteration_ == total;
    if (eval) {
      const double metric = evaluate_probe();
      row.probe_metric = metric;
      if (metric > best_metric_) {
        best_metric_ = metric;
        best_iteration_ = iteration_;
        best_bytes_ = serialize_checkpoint(checkpoint());
        if (options_.write_files) {
          std::ofstream out(out_path(config_, "best.ckpt"), std::ios::binary | std::ios::trunc);
          out.write(best_bytes_.data(), static_cast<std::streamsize>(best_bytes_.size()));
        }
      }
      if (options_.write_files) save_checkpoint(out_path(config_, "last.ckpt").string(), checkpoint());
    }
    append_log(row);
  }
  if (options_.write_files && iteration_ == stop) save_checkpoint(out_path(config_, "last.ckpt").string(), checkpoint());
}

void Trainer::append_log(const LogRow& row) {
  log_.push_back(row);
  if (options_.on_step) options_.on_step(row);
  if (options_.write_files) {
    std::ofstream out(out_path(config_, "train.csv"), std::ios::app);
    out << log_line(row) << "\n";
  }
}

void Trainer::write_nan_dump(const Batch& batch, double loss) const {
  if (!options_.write_files) return;
  std::filesystem::create_directories(config_.output_dir);
  std::ofstream out(out_path(config_, "nan_batch.txt"));
  out << "iteration " << iteration_ << "\nloss " << loss << "\nrows " << batch.rows << "\n";
  for (std::size_t b = 0; b < batch.rows; ++b) {
    out << batch.ids[b] << " tokens";
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) out << " " << batch.token(b, t);
    out << "\n";
  }
}

}  // namespace bicap
