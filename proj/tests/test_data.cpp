#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bicap/data.hpp"
#include "bicap/errors.hpp"
#include "bicap/image.hpp"
#include "bicap/rng.hpp"

using namespace bicap;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("bicap_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform({3, h, w}, rng, 0.0, 1.0);
}

std::vector<float> pixels(const Tensor& t) {
  auto d = t.data<float>();
  return {d.begin(), d.end()};
}

CaptionRecord record(const std::string& id, std::vector<std::string> captions, std::size_t side = 8) {
  return {id, random_image(side, side, std::hash<std::string>{}(id)), std::move(captions), {}};
}

// Character-level vocabulary: every letter is one token.
Vocabulary letters() { return Vocabulary::train({"a b c d e f g h"}, 5 + 9); }

}  // namespace

// --- manifest -------------------------------------------------------------

TEST(Manifest, LoadsEveryRecord) {
  const auto dir = scratch_dir("load");
  write_dataset(dir.string(), {record("one", {"a cat"}), record("two", {"a dog", "two dogs"})});
  auto records = load_manifest((dir / "manifest.jsonl").string());
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[1].id, "two");
  EXPECT_EQ(records[1].captions.size(), 2u);
  EXPECT_EQ(records[0].image.shape(), (Shape{3, 8, 8}));
}

TEST(Manifest, EmptyCaptionListIsASchemaError) {
  const auto dir = scratch_dir("empty");
  image::save_png((dir / "x.png").string(), random_image(4, 4, 1));
  std::ofstream(dir / "m.jsonl") << R"({"id": "x", "image": "x.png", "captions": []})" << '\n';
  EXPECT_THROW(load_manifest((dir / "m.jsonl").string()), SchemaError);
}

TEST(Manifest, MissingImageNamesTheRecord) {
  const auto dir = scratch_dir("missing");
  std::ofstream(dir / "m.jsonl") << R"({"id": "rec-17", "image": "nope.png", "captions": ["a"]})" << '\n';
  try {
    load_manifest((dir / "m.jsonl").string());
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("rec-17"), std::string::npos);
  }
}

TEST(Manifest, RawTensorImagesAreAccepted) {
  const auto dir = scratch_dir("raw");
  {
    std::ofstream f(dir / "img.bin", std::ios::binary);
    write_tensor(f, random_image(5, 6, 2));
  }
  std::ofstream(dir / "m.jsonl") << R"({"id": "r", "image": "img.bin", "captions": ["x"]})" << '\n';
  auto records = load_manifest((dir / "m.jsonl").string());
  EXPECT_EQ(records.at(0).image.shape(), (Shape{3, 5, 6}));
}

TEST(Manifest, PngRoundTripWithinQuantization) {
  const auto dir = scratch_dir("png");
  Tensor img = random_image(7, 9, 3);
  image::save_png((dir / "a.png").string(), img);
  Tensor back = image::load_png((dir / "a.png").string());
  ASSERT_EQ(back.shape(), img.shape());
  const auto a = pixels(img), b = pixels(back);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 0.5 / 255 + 1e-6);
}

TEST(Loader, OneRandomEpochTouchesEachImageOnce) {
  std::vector<CaptionRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(record("r" + std::to_string(i), {"a", "b", "c", "d", "e"}));
  Vocabulary v = letters();
  DataLoader loader(records, v, {.batch_size = 5, .image_size = 8, .max_len = 8, .seed = 3});
  std::vector<int> seen(10, 0);
  for (std::size_t it = 0; it < 2; ++it)
    for (std::size_t i : loader.indices_at(it)) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(loader.batch_at(0).rows, 5u);
}

TEST(Loader, SameSeedSameStream) {
  std::vector<CaptionRecord> records;
  for (int i = 0; i < 6; ++i) records.push_back(record("r" + std::to_string(i), {"a b", "c d e", "left f"}, 12));
  Vocabulary v = Vocabulary::train({"a b c d e left f right"}, 40);
  LoaderConfig cfg{.batch_size = 4, .image_size = 8, .max_len = 10, .seed = 9};
  DataLoader a(records, v, cfg), b(records, v, cfg);
  for (std::size_t it = 0; it < 5; ++it) {
    Batch x = a.batch_at(it), y = b.batch_at(it);
    EXPECT_EQ(x.tokens, y.tokens);
    EXPECT_EQ(pixels(x.images), pixels(y.images));
  }
  cfg.seed = 10;
  DataLoader c(records, v, cfg);
  EXPECT_NE(pixels(a.batch_at(0).images), pixels(c.batch_at(0).images));
}

// --- crop -----------------------------------------------------------------

TEST(Crop, FullScaleOnSquareInputIsResizeOnly) {
  Tensor img = random_image(20, 20, 4);
  std::mt19937_64 rng(1);
  Tensor out = random_resized_crop(img, {.scale_min = 1.0, .scale_max = 1.0}, 8, rng);
  EXPECT_EQ(pixels(out), pixels(image::resize_bilinear(img, 8, 8)));
}

TEST(Crop, OutputShapeIsAlwaysSquare) {
  Tensor img = random_image(24, 40, 5);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(random_resized_crop(img, {}, 16, rng).shape(), (Shape{3, 16, 16}));
}

TEST(Crop, AreaFractionIsUniform) {
  // 10^4 draws, 8 equal bins over [0.2, 1]; each count within 3 sigma of
  // the multinomial expectation.
  std::mt19937_64 rng(3);
  const std::size_t side = 1000, draws = 10000, bins = 8;
  std::vector<double> counts(bins, 0.0);
  for (std::size_t i = 0; i < draws; ++i) {
    const CropBox b = sample_crop_box(side, side, {}, rng);
    ASSERT_LE(b.top + b.height, side);
    ASSERT_LE(b.left + b.width, side);
    const double frac = static_cast<double>(b.height * b.width) / (side * side);
    const double ratio = static_cast<double>(b.width) / static_cast<double>(b.height);
    EXPECT_GE(ratio, 0.75 - 0.01);
    EXPECT_LE(ratio, 4.0 / 3.0 + 0.01);
    const auto k = std::min<std::size_t>(bins - 1, static_cast<std::size_t>((frac - 0.2) / 0.8 * bins));
    counts[k] += 1;
  }
  const double p = 1.0 / bins, mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  for (double c : counts) EXPECT_NEAR(c, mean, 3 * sigma);
}

TEST(Crop, TinyImageIsRejected) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(sample_crop_box(1, 1, {}, rng), DimensionError);
}

// --- color ----------------------------------------------------------------

TEST(ColorJitter, ZeroRangesAreIdentity) {
  Tensor img = random_image(6, 6, 6);
  std::mt19937_64 rng(5);
  EXPECT_EQ(pixels(color_jitter(img, {0, 0, 0, 0}, rng)), pixels(img));
}

TEST(ColorJitter, BrightnessDoublesGray) {
  Tensor img = Tensor::full({3, 2, 2}, 0.25);
  for (float v : pixels(adjust_brightness(img, 2.0))) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(ColorJitter, OutputStaysInUnitRange) {
  std::mt19937_64 rng(6);
  const JitterOptions strong{0.9, 0.9, 0.9, 0.5};
  for (int i = 0; i < 1000; ++i) {
    for (float v : pixels(color_jitter(random_image(4, 4, 100 + i), strong, rng))) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(ColorJitter, NegativeRangeIsRejected) {
  std::mt19937_64 rng(7);
  EXPECT_THROW(color_jitter(random_image(2, 2, 1), {-0.1, 0, 0, 0}, rng), ParameterError);
}

TEST(ColorJitter, ZeroHueShiftPreservesColor) {
  Tensor img = random_image(5, 5, 8);
  const auto a = pixels(img), b = pixels(adjust_hue(img, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  // full turn of red lands back on red; a third of a turn makes it green
  Tensor red = Tensor::from_vector({3, 1, 1}, {1, 0, 0});
  auto g = pixels(adjust_hue(red, 1.0 / 3.0));
  EXPECT_NEAR(g[0], 0.0, 1e-6);
  EXPECT_NEAR(g[1], 1.0, 1e-6);
}

// --- flip -----------------------------------------------------------------

TEST(Flip, SwapsLeftAndRight) {
  EXPECT_EQ(swap_left_right("a cat to the left of a dog"), "a cat to the right of a dog");
  EXPECT_EQ(swap_left_right("Left, RIGHT and right."), "Right, LEFT and left.");
  EXPECT_EQ(swap_left_right("copyright leftover"), "copyright leftover");
}

TEST(Flip, CaptionSwapIsAnInvolution) {
  for (const std::string s : {"left right left", "the Left hand", "nothing here", "right-left"}) {
    EXPECT_EQ(swap_left_right(swap_left_right(s)), s);
  }
}

TEST(Flip, ImageAndCaptionFlipTogether) {
  Tensor img = random_image(3, 5, 9);
  std::mt19937_64 rng(10);
  auto [flipped, caps] = hflip_with_caption_swap(img, {"ball on the left"}, rng, 1.0);
  EXPECT_EQ(caps.front(), "ball on the right");
  EXPECT_EQ(pixels(image::hflip(flipped)), pixels(img));
  auto [same, kept] = hflip_with_caption_swap(img, {"ball on the left"}, rng, 0.0);
  EXPECT_EQ(kept.front(), "ball on the left");
  EXPECT_EQ(pixels(same), pixels(img));
  const auto a = pixels(img), b = pixels(flipped);
  EXPECT_EQ(b[0], a[4]);
}

// --- normalization ----------------------------------------------------------

TEST(NormalizeImage, Defaults) {
  LoaderConfig cfg;
  EXPECT_EQ(cfg.mean, (std::array<double, 3>{0.485, 0.456, 0.406}));
  EXPECT_EQ(cfg.std, (std::array<double, 3>{0.229, 0.224, 0.225}));
}

TEST(NormalizeImage, IdentityAndMeanImage) {
  Tensor img = random_image(3, 3, 11);
  EXPECT_EQ(pixels(normalize_image(img, {0, 0, 0}, {1, 1, 1})), pixels(img));
  std::vector<double> v;
  for (double m : kImageNetMean) v.insert(v.end(), 4, m);
  for (float x : pixels(normalize_image(Tensor::from_vector({3, 2, 2}, v), kImageNetMean, kImageNetStd))) {
    EXPECT_NEAR(x, 0.0f, 1e-6);
  }
  EXPECT_THROW(normalize_image(img, {0, 0, 0}, {1, 0, 1}), ParameterError);
}

// --- collate ----------------------------------------------------------------

TEST(Collate, PadsToLongestRow) {
  Vocabulary v = letters();
  std::mt19937_64 rng(12);
  Batch b = collate({record("x", {"abc"}), record("y", {"abcde"})}, v, 32, CaptionMode::one_random, rng);
  // "abc" = marker a b c -> 4 interior tokens; compare relative padding
  ASSERT_EQ(b.rows, 2u);
  EXPECT_EQ(b.max_len, b.lengths[1]);
  EXPECT_EQ(b.lengths[1] - b.lengths[0], 2u);
  EXPECT_EQ(b.token(0, b.max_len - 1), token_ids::pad);
  EXPECT_EQ(b.token(0, b.max_len - 2), token_ids::pad);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 8, 8}));
}

TEST(Collate, ThreeAndFiveTokenCaptions) {
  // Whole-word tokens: every word below is learned as one token.
  Vocabulary v = Vocabulary::train({"xx yy xx yy xx yy"}, 100);
  ASSERT_TRUE(v.find(std::string(kWordMarker) + "xx").has_value());
  std::mt19937_64 rng(13);
  Batch b = collate({record("x", {"xx yy xx"}), record("y", {"xx yy xx yy xx"})}, v, 32, CaptionMode::one_random, rng);
  EXPECT_EQ(b.max_len, 7u);
  EXPECT_EQ(b.lengths, (std::vector<std::size_t>{5, 7}));
  EXPECT_EQ(b.mask[5], 0);
  EXPECT_EQ(b.mask[6], 0);
  EXPECT_EQ(b.token(0, 5), token_ids::pad);
}

TEST(Collate, TruncationKeepsEos) {
  Vocabulary v = letters();
  std::mt19937_64 rng(14);
  Batch b = collate({record("x", {"abcdefgh"})}, v, 4, CaptionMode::one_random, rng);
  EXPECT_EQ(b.max_len, 4u);
  EXPECT_EQ(b.token(0, 0), token_ids::sos);
  EXPECT_EQ(b.token(0, 3), token_ids::eos);
  EXPECT_THROW(collate({record("x", {"a"})}, v, 1, CaptionMode::one_random, rng), ParameterError);
}

TEST(Collate, RowInvariants) {
  Vocabulary v = letters();
  std::mt19937_64 rng(15);
  std::vector<CaptionRecord> recs{record("a", {"a", "bb cc", ""}), record("b", {"h g f e d c b a", "ab"})};
  Batch b = collate(recs, v, 12, CaptionMode::all, rng);
  ASSERT_EQ(b.rows, 5u);
  for (std::size_t r = 0; r < b.rows; ++r) {
    EXPECT_EQ(b.token(r, 0), token_ids::sos);
    std::size_t eos = 0;
    for (std::size_t t = 0; t < b.max_len; ++t) {
      eos += b.token(r, t) == token_ids::eos;
      EXPECT_EQ(b.mask[r * b.max_len + t] == 0, b.token(r, t) == token_ids::pad);
    }
    EXPECT_EQ(eos, 1u);
  }
}

TEST(Collate, OneRandomSelectsCaptionsUniformly) {
  Vocabulary v = letters();
  std::mt19937_64 rng(16);
  std::vector<CaptionRecord> recs{record("r", {"a", "b", "c", "d", "e"})};
  std::map<std::int64_t, int> counts;
  for (int i = 0; i < 10000; ++i) ++counts[collate(recs, v, 8, CaptionMode::one_random, rng).token(0, 2)];
  ASSERT_EQ(counts.size(), 5u);
  for (const auto& [_, n] : counts) EXPECT_NEAR(n, 2000, 150);
}

TEST(Collate, EmptyBatchIsRejected) {
  Vocabulary v = letters();
  std::mt19937_64 rng(17);
  EXPECT_THROW(collate({}, v, 8, CaptionMode::one_random, rng), ParameterError);
}

// --- resampling ---------------------------------------------------------------

TEST(Resize, ConstantStaysConstant) {
  Tensor c = Tensor::full({4, 4}, 0.3);
  for (float v : pixels(image::resize_bicubic(c, 13, 13))) EXPECT_NEAR(v, 0.3, 1e-6);
  for (float v : pixels(image::resize_bilinear(Tensor::full({3, 4, 4}, 0.7), 9, 5))) EXPECT_NEAR(v, 0.7, 1e-6);
}

TEST(Resize, SameSizeIsIdentity) {
  Tensor img = random_image(6, 6, 18);
  EXPECT_EQ(pixels(image::resize_bilinear(img, 6, 6)), pixels(img));
  const auto a = pixels(img), b = pixels(image::resize_bicubic(img, 6, 6));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

// --- synthetic data -----------------------------------------------------------

TEST(Synth, CaptionSetIsUniqueAndShort) {
  auto recs = synth_caption_set({.image_size = 64, .captions_per_image = 1, .seed = 0});
  ASSERT_EQ(recs.size(), 32u);
  std::set<std::string> caps;
  for (const auto& r : recs) caps.insert(r.captions.at(0));
  EXPECT_EQ(caps.size(), 32u);
  std::vector<std::string> corpus(caps.begin(), caps.end());
  Vocabulary v = Vocabulary::train(corpus, 64);
  for (const auto& c : corpus) EXPECT_LE(v.encode(c).size(), 8u) << c;
}

TEST(Synth, ProbeSetIsDeterministic) {
  auto a = synth_probe_set(5, {.seed = 4}), b = synth_probe_set(5, {.seed = 4});
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(pixels(a[i].image), pixels(b[i].image));
    EXPECT_EQ(a[i].labels, b[i].labels);
  }
}
