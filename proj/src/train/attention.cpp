#include "bicap/attention.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>

#include "bicap/errors.hpp"
#include "bicap/image.hpp"

namespace bicap {

Tensor normalize_minmax(const Tensor& map) {
  const auto v = map.to_vector();
  if (v.empty()) return Tensor::zeros(map.shape(), map.dtype());
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (range > 0)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp((v[i] - a) / range, 0.0, 1.0);
  return Tensor::from_vector(map.shape(), out, map.dtype());
}

std::vector<AttentionMap> extract_attention(const Model& model, const Tensor& image, const TokenSequence& tokens,
                                            std::optional<std::size_t> layer) {
  if (!model.has_head()) throw ConfigError("extract_attention: model has no textual head");
  if (image.rank() != 3) throw DimensionError("extract_attention: expected one image [3, S, S]");
  if (tokens.size() < 2) return {};
  const auto& head = model.head;
  const std::size_t steps = tokens.size() - 1;
  if (steps > head.config().max_positions) {
    throw IndexError("extract_attention: " + std::to_string(steps) + " tokens exceed decoder capacity " +
                     std::to_string(head.config().max_positions));
  }
  const std::size_t n_layers = head.layers(Direction::forward).size();
  const std::size_t which = layer.value_or(n_layers - 1);
  if (which >= n_layers) throw IndexError("extract_attention: layer " + std::to_string(which) + " does not exist");

  NoGradGuard guard;
  const Tensor batch = ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  const Tensor visual = model.visual_features(batch, false);
  std::vector<Tensor> cross;
  DecodeOptions options;
  options.cross_attention = &cross;
  const std::vector<std::int64_t> inputs(tokens.begin(), tokens.end() - 1);
  head.decode_logits(Direction::forward, inputs, 1, steps, {steps}, visual, options);

  const Tensor& w = cross.at(which);  // [1, A, T, N]
  const std::size_t A = w.dim(1), T = w.dim(2), N = w.dim(3);
  const std::size_t G = model.config().backbone.grid;
  if (G * G != N) throw DimensionError("extract_attention: grid does not match attention width");
  const std::size_t S = image.dim(1);
  const auto wv = w.to_vector();

  std::vector<AttentionMap> maps;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> per_head(A * N), avg(N, 0.0);
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t n = 0; n < N; ++n) {
        const double x = wv[(a * T + t) * N + n];
        per_head[a * N + n] = x;
        avg[n] += x / static_cast<double>(A);
      }
    AttentionMap m;
    m.step = t + 1;
    m.token = tokens[t + 1];
    m.heads = Tensor::from_vector({A, G, G}, per_head, DType::f64);
    m.average = Tensor::from_vector({G, G}, avg, DType::f64);
    m.overlay = normalize_minmax(image::resize_bicubic(m.average.to(DType::f32), S, S));
    maps.push_back(std::move(m));
  }
  return maps;
}

std::string overlay_filename(const std::string& image_id, std::size_t step, std::int64_t token,
                             const Vocabulary& vocab) {
  std::string name;
  if (token >= 0 && static_cast<std::size_t>(token) < vocab.size()) {
    for (unsigned char c : vocab.token(token))
      if (std::isalnum(c)) name += static_cast<char>(std::tolower(c));
  }
  if (name.empty()) name = std::to_string(token);
  return image_id + "_" + std::to_string(step) + "_" + name + ".ppm";
}

std::vector<std::string> write_overlays(const std::string& dir, const std::string& image_id, const Tensor& picture,
                                        const std::vector<AttentionMap>& maps, const Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  const std::size_t S = picture.dim(1), W = picture.dim(2);
  const auto pic = picture.to_vector();
  std::vector<std::string> paths;
  for (const auto& m : maps) {
    if (m.overlay.dim(0) != S || m.overlay.dim(1) != W) throw DimensionError("write_overlays: overlay size differs from picture");
    const auto heat = m.overlay.to_vector();
    std::vector<double> out(3 * S * W);
    for (std::size_t i = 0; i < S * W; ++i) {
      const double h = heat[i];
      out[i] = 0.5 * pic[i] + 0.5 * h;
      out[S * W + i] = 0.5 * pic[S * W + i];
      out[2 * S * W + i] = 0.5 * pic[2 * S * W + i] + 0.5 * (1.0 - h) * 0.3;
    }
    const std::string path = (std::filesystem::path(dir) / overlay_filename(image_id, m.step, m.token, vocab)).string();
    image::save_ppm(path, Tensor::from_vector({3, S, W}, out));
    paths.push_back(path);
  }
  return paths;
}

}  // namespace bicap
