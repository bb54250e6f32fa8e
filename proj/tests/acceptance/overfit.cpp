#include "overfit.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bicap/decode.hpp"

namespace bicap::acceptance {

std::vector<CaptionRecord> overfit_records() { return synth_caption_set({.image_size = 64, .seed = 11}); }

Vocabulary overfit_vocabulary(const std::vector<CaptionRecord>& records) {
  std::vector<std::string> corpus;
  for (const auto& r : records) corpus.insert(corpus.end(), r.captions.begin(), r.captions.end());
  return Vocabulary::train(corpus, 64);
}

RunConfig overfit_config(TaskKind task, const std::string& output_dir) {
  RunConfig c;
  c.model.task = task;
  c.model.backbone.widths = {8, 16, 32, 64};
  c.model.backbone.blocks = {1, 1, 1, 1};
  c.model.backbone.image_size = 64;
  c.model.backbone.grid = 4;
  c.model.head.hidden = 64;
  c.model.head.layers = 1;
  c.model.head.heads = 2;
  c.model.head.feedforward = 256;
  c.model.head.vocab = 64;
  c.model.head.max_positions = 10;
  c.model.head.dropout = 0.0;
  c.model.head.allow_nonstandard = true;
  c.data.augment = false;
  c.data.synth_probe_count = 96;
  c.optim.batch_size = 32;
  c.optim.backbone_lr = 0.1;
  c.optim.head_lr = 0.1;
  c.optim.schedule = {.warmup_iters = 100, .total_iters = 1000};
  c.eval.eval_period = 100;
  c.seed = 2024;
  c.output_dir = output_dir;
  return c;
}

OverfitRun run_overfit(const RunConfig& config, const std::vector<CaptionRecord>& records, const Vocabulary& vocab,
                       double threshold, bool decode) {
  OverfitRun out;
  const auto start = std::chrono::steady_clock::now();
  std::filesystem::remove_all(config.output_dir);
  Trainer trainer(config, records, probe_records(config), vocab);
  trainer.run();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.log = trainer.log();
  for (const auto& row : out.log) {
    if (row.loss < threshold) {
      out.first_below = row.iteration;
      break;
    }
  }
  out.final_loss = out.log.empty() ? 0 : out.log.back().loss;
  std::ifstream in(std::filesystem::path(config.output_dir) / "best.ckpt", std::ios::binary);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  out.best_checkpoint = bytes.str();
  if (decode) {
    const DataLoader& loader = trainer.loader();
    for (const auto& r : records) {
      const auto tokens = greedy_decode(model_scorer(trainer.model(), loader.eval_image(r.image)),
                                        {.max_steps = config.max_len() - 1});
      if (tokens == vocab.encode(r.captions.front())) ++out.reproduced;
    }
  }
  return out;
}

}  // namespace bicap::acceptance
