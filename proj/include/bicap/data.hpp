#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bicap/tensor.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

struct CaptionRecord {
  std::string id;
  Tensor image;  // [3, H, W] f32 in [0, 1]
  std::vector<std::string> captions;
  // Class indices for probe sets; empty for pretraining data.
  std::vector<int> labels;
};

struct ManifestOptions {
  bool require_captions = true;
  bool require_labels = false;
};

// JSON lines: {"id": str, "image": path, "captions": [str, ...], "labels": [int, ...]}.
// Relative image paths resolve against the manifest's directory.
std::vector<CaptionRecord> load_manifest(const std::string& path, ManifestOptions options = {});
// Writes every image as <dir>/<id>.png and a manifest.jsonl next to them.
void write_dataset(const std::string& dir, const std::vector<CaptionRecord>& records);

// ---------------------------------------------------------------------------
// Augmentations

struct CropOptions {
  double scale_min = 0.2;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
};

struct CropBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// Area fraction uniform in [scale_min, scale_max]; aspect ratio log-uniform
// over the part of [ratio_min, ratio_max] that fits the image at that area.
CropBox sample_crop_box(std::size_t height, std::size_t width, const CropOptions& options, std::mt19937_64& rng);
Tensor random_resized_crop(const Tensor& img, const CropOptions& options, std::size_t out, std::mt19937_64& rng);

struct JitterOptions {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
};

Tensor adjust_brightness(const Tensor& img, double factor);
Tensor adjust_contrast(const Tensor& img, double factor);
Tensor adjust_saturation(const Tensor& img, double factor);
// Shift in turns, in [-0.5, 0.5].
Tensor adjust_hue(const Tensor& img, double shift);
// Factors uniform in [max(0, 1 - r), 1 + r] (hue: [-r, r]), applied in random order.
Tensor color_jitter(const Tensor& img, const JitterOptions& options, std::mt19937_64& rng);

// Whole-word, case-preserving exchange of "left" and "right".
std::string swap_left_right(std::string_view caption);
std::pair<Tensor, std::vector<std::string>> hflip_with_caption_swap(const Tensor& img,
                                                                    std::vector<std::string> captions,
                                                                    std::mt19937_64& rng, double p = 0.5);

inline constexpr std::array<double, 3> kImageNetMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStd{0.229, 0.224, 0.225};
Tensor normalize_image(const Tensor& img, const std::array<double, 3>& mean, const std::array<double, 3>& std);

// ---------------------------------------------------------------------------
// Batching

enum class CaptionMode { one_random, all };
CaptionMode parse_caption_mode(std::string_view name);
std::string caption_mode_name(CaptionMode mode);

struct Batch {
  Tensor images;                     // [B, 3, S, S]
  std::vector<std::int64_t> tokens;  // [B, L] row-major, [PAD]-filled
  std::vector<std::uint8_t> mask;    // [B, L], 0 exactly at [PAD]
  std::vector<std::size_t> lengths;  // per row, boundaries included
  std::vector<std::string> ids;      // record id per row
  std::size_t rows = 0;
  std::size_t max_len = 0;

  std::int64_t token(std::size_t b, std::size_t t) const { return tokens[b * max_len + t]; }
};

// Images must already share one size. In one_random mode each record yields
// one row with a caption drawn from rng; in all mode one row per caption.
Batch collate(const std::vector<CaptionRecord>& records, const Vocabulary& vocab, std::size_t max_len,
              CaptionMode mode, std::mt19937_64& rng);

struct LoaderConfig {
  std::size_t batch_size = 32;
  std::size_t image_size = 64;
  std::size_t max_len = 32;
  CaptionMode caption_mode = CaptionMode::one_random;
  bool augment = true;
  CropOptions crop;
  JitterOptions jitter;
  double flip_p = 0.5;
  std::array<double, 3> mean = kImageNetMean;
  std::array<double, 3> std = kImageNetStd;
  std::uint64_t seed = 0;
};

/// Deterministic batch stream.
///
/// Iteration i covers positions [i*B, (i+1)*B) of an endless sequence of
/// per-epoch permutations. Each record's augmentation draws from a stream
/// keyed by (seed, epoch, record index), so any batch can be rebuilt from
/// its iteration number alone.
class DataLoader {
 public:
  DataLoader(const std::vector<CaptionRecord>& records, const Vocabulary& vocab, LoaderConfig config);

  Batch batch_at(std::size_t iteration) const;
  // Record indices that batch_at(iteration) draws from, in order.
  std::vector<std::size_t> indices_at(std::size_t iteration) const;
  // Training transform of one record (augmentation, caption choice, normalization).
  CaptionRecord transform(std::size_t record_index, std::uint64_t epoch) const;
  // Eval transform: resize and normalize only.
  Tensor eval_image(const Tensor& img) const;

  std::size_t size() const { return records_->size(); }
  const LoaderConfig& config() const { return config_; }

 private:
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;

  const std::vector<CaptionRecord>* records_;
  const Vocabulary* vocab_;
  LoaderConfig config_;
};

Tensor stack_images(const std::vector<Tensor>& images);

// ---------------------------------------------------------------------------
// Synthetic shapes

struct SynthOptions {
  std::size_t image_size = 64;
  std::size_t captions_per_image = 1;
  std::uint64_t seed = 0;
};

inline constexpr std::array<std::string_view, 4> kSynthColors{"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, 4> kSynthShapes{"circle", "square", "triangle", "cross"};
inline constexpr std::array<std::string_view, 2> kSynthSides{"left", "right"};

// One record per (color, shape, side) combination, in a fixed order; the
// first caption of each is unique across the set.
std::vector<CaptionRecord> synth_caption_set(const SynthOptions& options);
// Shapes of random color near the caption set's left/right anchors, with
// jittered position and size, labelled by shape index (for probing).
std::vector<CaptionRecord> synth_probe_set(std::size_t count, const SynthOptions& options);
// Renders one shape; cx, cy, radius in pixels.
Tensor render_shape(std::size_t size, std::size_t color, std::size_t shape, double cx, double cy, double radius,
                    std::mt19937_64& rng);

}  // namespace bicap
