#include <cmath>

#include "bicap/data.hpp"
#include "bicap/errors.hpp"
#include "bicap/rng.hpp"

namespace bicap {

namespace {

constexpr std::array<std::array<float, 3>, 4> kRgb{{
    {0.90f, 0.12f, 0.10f},
    {0.10f, 0.75f, 0.20f},
    {0.15f, 0.25f, 0.95f},
    {0.95f, 0.88f, 0.10f},
}};

bool inside(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case 2: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    default: {
      const double arm = r / 3.0;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
  }
}

std::vector<std::string> captions_for(std::string_view color, std::string_view shape, std::string_view side) {
  const std::string c(color), s(shape), d(side);
  return {
      c + " " + s + " " + d,
      "a " + c + " " + s + " on the " + d,
      "the " + s + " on the " + d + " is " + c,
      "on the " + d + " a " + c + " " + s,
      "a " + s + " colored " + c + " at " + d,
  };
}

}  // namespace

Tensor render_shape(std::size_t size, std::size_t color, std::size_t shape, double cx, double cy, double radius,
                    std::mt19937_64& rng) {
  if (color >= kRgb.size() || shape >= kSynthShapes.size()) throw ParameterError("render_shape: unknown color/shape");
  const std::size_t plane = size * size;
  std::vector<float> px(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const float bg = static_cast<float>(0.5 + uniform(rng, -0.04, 0.04));
    for (std::size_t c = 0; c < 3; ++c) px[c * plane + i] = bg;
  }
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      if (!inside(shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, radius)) continue;
      for (std::size_t c = 0; c < 3; ++c) px[c * plane + y * size + x] = kRgb[color][c];
    }
  }
  return Tensor::from_buffer<float>({3, size, size}, std::move(px));
}

std::vector<CaptionRecord> synth_caption_set(const SynthOptions& options) {
  if (options.captions_per_image < 1 || options.captions_per_image > 5) {
    throw ParameterError("synth: captions_per_image must be in [1, 5]");
  }
  if (options.image_size < 8) throw ParameterError("synth: image_size must be at least 8");
  const double s = static_cast<double>(options.image_size);
  std::vector<CaptionRecord> out;
  std::size_t index = 0;
  for (std::size_t c = 0; c < kSynthColors.size(); ++c) {
    for (std::size_t k = 0; k < kSynthShapes.size(); ++k) {
      for (std::size_t side = 0; side < kSynthSides.size(); ++side) {
        auto rng = derive_rng(options.seed, {index});
        CaptionRecord r;
        r.id = "synth_" + std::to_string(index);
        r.image = render_shape(options.image_size, c, k, side == 0 ? 0.28 * s : 0.72 * s, 0.5 * s, 0.2 * s, rng);
        auto caps = captions_for(kSynthColors[c], kSynthShapes[k], kSynthSides[side]);
        r.captions.assign(caps.begin(), caps.begin() + static_cast<long>(options.captions_per_image));
        r.labels = {static_cast<int>(k)};
        out.push_back(std::move(r));
        ++index;
      }
    }
  }
  return out;
}

std::vector<CaptionRecord> synth_probe_set(std::size_t count, const SynthOptions& options) {
  if (options.image_size < 8) throw ParameterError("synth: image_size must be at least 8");
  const double s = static_cast<double>(options.image_size);
  std::vector<CaptionRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto rng = derive_rng(options.seed, {0x50524f42ULL, i});
    const auto color = static_cast<std::size_t>(uniform_index(rng, kSynthColors.size()));
    const auto shape = static_cast<std::size_t>(uniform_index(rng, kSynthShapes.size()));
    const auto side = static_cast<std::size_t>(uniform_index(rng, kSynthSides.size()));
    const double radius = uniform(rng, 0.17, 0.23) * s;
    const double cx = (side == 0 ? 0.28 : 0.72) * s + uniform(rng, -0.04, 0.04) * s;
    const double cy = 0.5 * s + uniform(rng, -0.04, 0.04) * s;
    CaptionRecord r;
    r.id = "probe_" + std::to_string(i);
    r.image = render_shape(options.image_size, color, shape, cx, cy, radius, rng);
    auto caps = captions_for(kSynthColors[color], kSynthShapes[shape], kSynthSides[side]);
    r.captions.assign(caps.begin(), caps.begin() + static_cast<long>(std::clamp<std::size_t>(options.captions_per_image, 1, 5)));
    r.labels = {static_cast<int>(shape)};
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace bicap
