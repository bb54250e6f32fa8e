#include "bicap/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "bicap/errors.hpp"
#include "bicap/image.hpp"
#include "bicap/rng.hpp"
#include "json.hpp"

namespace bicap {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

std::vector<CaptionRecord> load_manifest(const std::string& path, ManifestOptions options) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<CaptionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("image") ||
        !j["image"].is_string()) {
      throw SchemaError(where + ": record needs string fields 'id' and 'image'");
    }
    CaptionRecord r;
    r.id = j["id"].get<std::string>();
    if (j.contains("captions")) {
      if (!j["captions"].is_array()) throw SchemaError(where + ": 'captions' must be a list (record " + r.id + ")");
      for (const auto& c : j["captions"]) {
        if (!c.is_string()) throw SchemaError(where + ": non-string caption in record " + r.id);
        r.captions.push_back(c.get<std::string>());
      }
    }
    if (options.require_captions && r.captions.empty()) {
      throw SchemaError(where + ": record " + r.id + " has no captions");
    }
    if (j.contains("labels")) {
      if (!j["labels"].is_array()) throw SchemaError(where + ": 'labels' must be a list (record " + r.id + ")");
      for (const auto& l : j["labels"]) {
        if (!l.is_number_integer() || l.get<int>() < 0) throw SchemaError(where + ": bad label in record " + r.id);
        r.labels.push_back(l.get<int>());
      }
    }
    if (options.require_labels && r.labels.empty()) throw SchemaError(where + ": record " + r.id + " has no labels");

    fs::path image_path = j["image"].get<std::string>();
    if (image_path.is_relative()) image_path = base / image_path;
    if (!fs::exists(image_path)) {
      throw IngestError("record " + r.id + ": image file not found: " + image_path.string());
    }
    try {
      r.image = image::load(image_path.string());
    } catch (const Error& e) {
      throw IngestError("record " + r.id + ": " + e.what());
    }
    if (r.image.rank() != 3 || r.image.dim(0) != 3) {
      throw SchemaError("record " + r.id + ": image must have 3 channels, got " + shape_str(r.image.shape()));
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_dataset(const std::string& dir, const std::vector<CaptionRecord>& records) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw IngestError("cannot write manifest in " + dir);
  for (const auto& r : records) {
    const std::string file = r.id + ".png";
    image::save_png((fs::path(dir) / file).string(), r.image);
    json j{{"id", r.id}, {"image", file}, {"captions", r.captions}};
    if (!r.labels.empty()) j["labels"] = r.labels;
    manifest << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Augmentations

CropBox sample_crop_box(std::size_t height, std::size_t width, const CropOptions& o, std::mt19937_64& rng) {
  if (height < 2 && width < 2) throw DimensionError("random_resized_crop: image must be larger than 1x1");
  if (!(o.scale_min > 0 && o.scale_min <= o.scale_max && o.scale_max <= 1.0) ||
      !(o.ratio_min > 0 && o.ratio_min <= o.ratio_max)) {
    throw ParameterError("random_resized_crop: invalid scale/ratio range");
  }
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = uniform(rng, o.scale_min, o.scale_max) * h * w;
    // Ratios r = width/height for which the window fits at this area.
    const double lo = std::max(o.ratio_min, area / (h * h));
    const double hi = std::min(o.ratio_max, (w * w) / area);
    if (lo > hi) continue;
    const double ratio = std::exp(uniform(rng, std::log(lo), std::log(hi)));
    const auto cw = static_cast<std::size_t>(std::lround(std::sqrt(area * ratio)));
    const auto ch = static_cast<std::size_t>(std::lround(std::sqrt(area / ratio)));
    if (cw < 1 || ch < 1 || cw > width || ch > height) continue;
    CropBox box{0, 0, ch, cw};
    box.top = static_cast<std::size_t>(uniform_index(rng, height - ch + 1));
    box.left = static_cast<std::size_t>(uniform_index(rng, width - cw + 1));
    return box;
  }
  // Center crop at the closest admissible aspect ratio.
  const double in_ratio = w / h;
  std::size_t cw = width, ch = height;
  if (in_ratio < o.ratio_min) {
    ch = static_cast<std::size_t>(std::lround(w / o.ratio_min));
  } else if (in_ratio > o.ratio_max) {
    cw = static_cast<std::size_t>(std::lround(h * o.ratio_max));
  }
  cw = std::clamp<std::size_t>(cw, 1, width);
  ch = std::clamp<std::size_t>(ch, 1, height);
  return {(height - ch) / 2, (width - cw) / 2, ch, cw};
}

Tensor random_resized_crop(const Tensor& img, const CropOptions& options, std::size_t out, std::mt19937_64& rng) {
  if (img.rank() != 3) throw DimensionError("random_resized_crop: expected [C,H,W], got " + shape_str(img.shape()));
  const CropBox box = sample_crop_box(img.dim(1), img.dim(2), options, rng);
  return image::resize_bilinear(image::crop(img, box.top, box.left, box.height, box.width), out, out);
}

namespace {

std::vector<float> floats(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("color op: expected [3,H,W], got " + shape_str(img.shape()));
  auto v = img.to(DType::f32);
  auto d = v.data<float>();
  return {d.begin(), d.end()};
}

float gray(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

Tensor blend_clamped(const Tensor& img, std::vector<float> v) {
  for (auto& x : v) x = std::clamp(x, 0.0f, 1.0f);
  return Tensor::from_buffer<float>(img.shape(), std::move(v));
}

void check_factor(double f, const char* what) {
  if (!(f >= 0) || !std::isfinite(f)) throw ParameterError(std::string(what) + ": factor must be non-negative");
}

}  // namespace

Tensor adjust_brightness(const Tensor& img, double factor) {
  check_factor(factor, "adjust_brightness");
  auto v = floats(img);
  for (auto& x : v) x = static_cast<float>(x * factor);
  return blend_clamped(img, std::move(v));
}

Tensor adjust_contrast(const Tensor& img, double factor) {
  check_factor(factor, "adjust_contrast");
  auto v = floats(img);
  const std::size_t plane = v.size() / 3;
  double mean = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean += gray(v[i], v[plane + i], v[2 * plane + i]);
  mean /= static_cast<double>(plane);
  for (auto& x : v) x = static_cast<float>(factor * x + (1.0 - factor) * mean);
  return blend_clamped(img, std::move(v));
}

Tensor adjust_saturation(const Tensor& img, double factor) {
  check_factor(factor, "adjust_saturation");
  auto v = floats(img);
  const std::size_t plane = v.size() / 3;
  for (std::size_t i = 0; i < plane; ++i) {
    const float g = gray(v[i], v[plane + i], v[2 * plane + i]);
    for (std::size_t c = 0; c < 3; ++c) {
      v[c * plane + i] = static_cast<float>(factor * v[c * plane + i] + (1.0 - factor) * g);
    }
  }
  return blend_clamped(img, std::move(v));
}

Tensor adjust_hue(const Tensor& img, double shift) {
  if (!(shift >= -0.5 && shift <= 0.5)) throw ParameterError("adjust_hue: shift must be in [-0.5, 0.5]");
  auto v = floats(img);
  const std::size_t plane = v.size() / 3;
  for (std::size_t i = 0; i < plane; ++i) {
    const double r = v[i], g = v[plane + i], b = v[2 * plane + i];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    double h = 0.0;
    if (d > 0) {
      if (mx == r) h = std::fmod((g - b) / d, 6.0);
      else if (mx == g) h = (b - r) / d + 2.0;
      else h = (r - g) / d + 4.0;
      h /= 6.0;
    }
    const double s = mx > 0 ? d / mx : 0.0;
    h = h + shift;
    h -= std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = mx * (1 - s), q = mx * (1 - s * f), t = mx * (1 - s * (1 - f));
    double rr, gg, bb;
    switch (sector) {
      case 0: rr = mx, gg = t, bb = p; break;
      case 1: rr = q, gg = mx, bb = p; break;
      case 2: rr = p, gg = mx, bb = t; break;
      case 3: rr = p, gg = q, bb = mx; break;
      case 4: rr = t, gg = p, bb = mx; break;
      default: rr = mx, gg = p, bb = q; break;
    }
    v[i] = static_cast<float>(rr);
    v[plane + i] = static_cast<float>(gg);
    v[2 * plane + i] = static_cast<float>(bb);
  }
  return blend_clamped(img, std::move(v));
}

Tensor color_jitter(const Tensor& img, const JitterOptions& o, std::mt19937_64& rng) {
  if (o.brightness < 0 || o.contrast < 0 || o.saturation < 0 || o.hue < 0) {
    throw ParameterError("color_jitter: negative range bound");
  }
  if (o.hue > 0.5) throw ParameterError("color_jitter: hue range must be at most 0.5");
  std::array<int, 4> order{0, 1, 2, 3};
  shuffle(order.begin(), order.end(), rng);
  Tensor out = img;
  for (int op : order) {
    switch (op) {
      case 0:
        if (o.brightness > 0) out = adjust_brightness(out, uniform(rng, std::max(0.0, 1 - o.brightness), 1 + o.brightness));
        break;
      case 1:
        if (o.contrast > 0) out = adjust_contrast(out, uniform(rng, std::max(0.0, 1 - o.contrast), 1 + o.contrast));
        break;
      case 2:
        if (o.saturation > 0) out = adjust_saturation(out, uniform(rng, std::max(0.0, 1 - o.saturation), 1 + o.saturation));
        break;
      default:
        if (o.hue > 0) out = adjust_hue(out, uniform(rng, -o.hue, o.hue));
        break;
    }
  }
  return out;
}

std::string swap_left_right(std::string_view caption) {
  auto word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || static_cast<unsigned char>(c) >= 0x80; };
  auto lower = [](std::string_view w) {
    std::string s(w);
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  auto match_case = [](std::string_view src, std::string_view repl) {
    std::string out(repl);
    const bool all_upper = std::all_of(src.begin(), src.end(), [](char c) { return std::isupper(static_cast<unsigned char>(c)); });
    if (all_upper) {
      for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    } else if (std::isupper(static_cast<unsigned char>(src.front()))) {
      out.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(out.front())));
    }
    return out;
  };
  std::string out;
  out.reserve(caption.size() + 1);
  std::size_t i = 0;
  while (i < caption.size()) {
    if (!word_char(caption[i])) {
      out.push_back(caption[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < caption.size() && word_char(caption[j])) ++j;
    const std::string_view word = caption.substr(i, j - i);
    const std::string l = lower(word);
    if (l == "left") out += match_case(word, "right");
    else if (l == "right") out += match_case(word, "left");
    else out.append(word);
    i = j;
  }
  return out;
}

std::pair<Tensor, std::vector<std::string>> hflip_with_caption_swap(const Tensor& img, std::vector<std::string> captions,
                                                                    std::mt19937_64& rng, double p) {
  if (!(p >= 0 && p <= 1)) throw ParameterError("hflip: probability must be in [0, 1]");
  if (uniform01(rng) >= p) return {img, std::move(captions)};
  for (auto& c : captions) c = swap_left_right(c);
  return {image::hflip(img), std::move(captions)};
}

Tensor normalize_image(const Tensor& img, const std::array<double, 3>& mean, const std::array<double, 3>& std) {
  for (double s : std) {
    if (!(s > 0)) throw ParameterError("normalize_image: std must be positive");
  }
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("normalize_image: expected [3,H,W], got " + shape_str(img.shape()));
  auto v = floats(img);
  const std::size_t plane = v.size() / 3;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) v[c * plane + i] = static_cast<float>((v[c * plane + i] - mean[c]) / std[c]);
  return Tensor::from_buffer<float>(img.shape(), std::move(v));
}

// ---------------------------------------------------------------------------
// Batching

CaptionMode parse_caption_mode(std::string_view name) {
  if (name == "one-random") return CaptionMode::one_random;
  if (name == "all") return CaptionMode::all;
  throw ConfigError("unknown caption mode '" + std::string(name) + "' (expected one-random or all)");
}

std::string caption_mode_name(CaptionMode mode) { return mode == CaptionMode::all ? "all" : "one-random"; }

Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ParameterError("stack_images: empty list");
  const Shape& s = images.front().shape();
  std::vector<float> out;
  out.reserve(images.size() * shape_numel(s));
  for (const auto& img : images) {
    if (img.shape() != s) throw DimensionError("stack_images: mixed shapes " + shape_str(s) + " and " + shape_str(img.shape()));
    const Tensor f = img.to(DType::f32);
    auto d = f.data<float>();
    out.insert(out.end(), d.begin(), d.end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor::from_buffer<float>(shape, std::move(out));
}

Batch collate(const std::vector<CaptionRecord>& records, const Vocabulary& vocab, std::size_t max_len,
              CaptionMode mode, std::mt19937_64& rng) {
  if (records.empty()) throw ParameterError("collate: empty batch");
  if (max_len < 2) throw ParameterError("collate: max_len must be at least 2");
  std::vector<std::vector<std::int64_t>> rows;
  std::vector<Tensor> images;
  Batch batch;
  for (const auto& r : records) {
    if (r.captions.empty()) throw SchemaError("collate: record " + r.id + " has no captions");
    std::vector<const std::string*> chosen;
    if (mode == CaptionMode::one_random) {
      chosen.push_back(&r.captions[uniform_index(rng, r.captions.size())]);
    } else {
      for (const auto& c : r.captions) chosen.push_back(&c);
    }
    for (const std::string* c : chosen) {
      auto ids = vocab.encode(*c);
      if (ids.size() > max_len) {
        ids.resize(max_len - 1);
        ids.push_back(token_ids::eos);
      }
      rows.push_back(std::move(ids));
      images.push_back(r.image);
      batch.ids.push_back(r.id);
    }
  }
  batch.rows = rows.size();
  for (const auto& r : rows) batch.max_len = std::max(batch.max_len, r.size());
  batch.tokens.assign(batch.rows * batch.max_len, token_ids::pad);
  batch.mask.assign(batch.rows * batch.max_len, 0);
  for (std::size_t b = 0; b < batch.rows; ++b) {
    std::copy(rows[b].begin(), rows[b].end(), batch.tokens.begin() + static_cast<long>(b * batch.max_len));
    std::fill_n(batch.mask.begin() + static_cast<long>(b * batch.max_len), rows[b].size(), 1);
    batch.lengths.push_back(rows[b].size());
  }
  batch.images = stack_images(images);
  return batch;
}

DataLoader::DataLoader(const std::vector<CaptionRecord>& records, const Vocabulary& vocab, LoaderConfig config)
    : records_(&records), vocab_(&vocab), config_(std::move(config)) {
  if (records.empty()) throw ParameterError("DataLoader: empty dataset");
  if (config_.batch_size == 0) throw ParameterError("DataLoader: batch_size must be positive");
  if (config_.image_size < 2) throw ParameterError("DataLoader: image_size must be at least 2");
}

std::vector<std::size_t> DataLoader::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> perm(records_->size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  auto rng = derive_rng(config_.seed, {0x5045524dULL, epoch});
  shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

std::vector<std::size_t> DataLoader::indices_at(std::size_t iteration) const {
  const std::size_t n = records_->size();
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> perm;
  for (std::size_t k = 0; k < config_.batch_size; ++k) {
    const std::size_t pos = iteration * config_.batch_size + k;
    const std::uint64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      perm = permutation(epoch);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

Tensor DataLoader::eval_image(const Tensor& img) const {
  Tensor x = img;
  if (x.dim(1) != config_.image_size || x.dim(2) != config_.image_size) {
    x = image::resize_bilinear(x, config_.image_size, config_.image_size);
  }
  return normalize_image(x, config_.mean, config_.std);
}

CaptionRecord DataLoader::transform(std::size_t record_index, std::uint64_t epoch) const {
  const CaptionRecord& src = records_->at(record_index);
  auto rng = derive_rng(config_.seed, {epoch, record_index});
  CaptionRecord out;
  out.id = src.id;
  out.labels = src.labels;
  if (config_.caption_mode == CaptionMode::one_random) {
    out.captions = {src.captions[uniform_index(rng, src.captions.size())]};
  } else {
    out.captions = src.captions;
  }
  Tensor img = src.image;
  if (config_.augment) {
    img = random_resized_crop(img, config_.crop, config_.image_size, rng);
    img = color_jitter(img, config_.jitter, rng);
    auto [flipped, captions] = hflip_with_caption_swap(img, std::move(out.captions), rng, config_.flip_p);
    img = flipped;
    out.captions = std::move(captions);
    out.image = normalize_image(img, config_.mean, config_.std);
  } else {
    out.image = eval_image(img);
  }
  return out;
}

Batch DataLoader::batch_at(std::size_t iteration) const {
  const std::size_t n = records_->size();
  std::vector<CaptionRecord> items;
  const auto idx = indices_at(iteration);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const std::uint64_t epoch = (iteration * config_.batch_size + k) / n;
    items.push_back(transform(idx[k], epoch));
  }
  auto rng = derive_rng(config_.seed, {0x434f4c4cULL, iteration});
  return collate(items, *vocab_, config_.max_len, CaptionMode::all, rng);
}

}  // namespace bicap
