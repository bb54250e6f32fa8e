#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bicap/checkpoint.hpp"
#include "bicap/config.hpp"
#include "bicap/data.hpp"
#include "bicap/model.hpp"
#include "bicap/optim.hpp"
#include "bicap/probe.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

struct LogRow {
  std::size_t iteration = 0;  // 1-based count of completed steps
  double loss = 0;
  double lr_backbone = 0;
  double lr_head = 0;
  std::optional<double> probe_metric;
  std::size_t supervised = 0;
  std::size_t candidates = 0;
  std::size_t rows = 0;
};

// "iter,loss,lr_backbone,lr_head,probe_metric"
std::string log_header();
std::string log_line(const LogRow& row);

struct TrainerOptions {
  // Write last.ckpt, best.ckpt and train.csv under config.output_dir.
  bool write_files = true;
  // Called after every step.
  std::function<void(const LogRow&)> on_step;
};

/// Pretraining loop.
///
/// Step i (0-based) trains on DataLoader::batch_at(i) at learning rate
/// lr_at(i); every random draw of the step comes from a stream keyed by
/// (seed, i). After every eval period and at the end the backbone is
/// probed on the held-out set and the best checkpoint retained.
class Trainer {
 public:
  Trainer(RunConfig config, std::vector<CaptionRecord> train, std::vector<CaptionRecord> probe, Vocabulary vocab,
          TrainerOptions options = {});
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // Loads model, optimizer and progress. Throws MismatchError when the
  // checkpoint was built for a different model.
  void resume(const Checkpoint& ckpt);

  // Runs steps until `until` (default: total_iters) steps are complete.
  // A non-finite loss throws NumericError naming the batch and, with file
  // output on, writes nan_batch.txt.
  void run(std::optional<std::size_t> until = std::nullopt);

  // One optimizer step; returns its log row (without probe).
  LogRow step();
  // Probe metric of the current backbone.
  double evaluate_probe() const;

  Checkpoint checkpoint() const;

  const Model& model() const { return *model_; }
  const RunConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const DataLoader& loader() const { return *loader_; }
  std::size_t iteration() const { return iteration_; }
  double best_metric() const { return best_metric_; }
  std::size_t best_iteration() const { return best_iteration_; }
  const std::vector<LogRow>& log() const { return log_; }
  // Serialized best checkpoint held in memory (empty before the first probe).
  const std::string& best_checkpoint_bytes() const { return best_bytes_; }

 private:
  void append_log(const LogRow& row);
  void write_nan_dump(const Batch& batch, double loss) const;

  RunConfig config_;
  std::vector<CaptionRecord> train_;
  std::vector<CaptionRecord> probe_;
  Vocabulary vocab_;
  TrainerOptions options_;
  std::unique_ptr<DataLoader> loader_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<LookAhead> optimizer_;
  std::size_t iteration_ = 0;
  double best_metric_ = -std::numeric_limits<double>::infinity();
  std::size_t best_iteration_ = 0;
  std::vector<LogRow> log_;
  std::string best_bytes_;
};

// Builds the loader configuration a run uses.
LoaderConfig loader_config(const RunConfig& config);

// Probe records: the configured manifest (labels required) or the synthetic
// shape set at the model's image size.
std::vector<CaptionRecord> probe_records(const RunConfig& config);
// Training records: the configured manifest or the synthetic caption set.
std::vector<CaptionRecord> train_records(const RunConfig& config);

}  // namespace bicap
