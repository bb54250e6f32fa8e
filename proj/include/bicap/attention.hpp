#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bicap/decode.hpp"
#include "bicap/model.hpp"
#include "bicap/tokenizer.hpp"

namespace bicap {

struct AttentionMap {
  std::size_t step = 0;    // 1-based position of the emitted token
  std::int64_t token = 0;  // token emitted at this step
  Tensor heads;            // [A, G, G], each head sums to 1
  Tensor average;          // [G, G]
  Tensor overlay;          // [S, S] in [0, 1]
};

// Min-max scaling to [0, 1]; a constant map becomes all zeros.
Tensor normalize_minmax(const Tensor& map);

/// Forward-decoder cross-attention behind each emitted token of `tokens`
/// ([SOS] first). `layer` defaults to the last decoder layer. The head
/// average is upsampled bicubically to the image side and min-max scaled.
/// Throws IndexError when the sequence exceeds the decoder capacity or the
/// layer does not exist.
std::vector<AttentionMap> extract_attention(const Model& model, const Tensor& image, const TokenSequence& tokens,
                                            std::optional<std::size_t> layer = std::nullopt);

// "<image_id>_<step>_<token>.ppm" with the token text reduced to [a-z0-9]
// (the id when nothing is left).
std::string overlay_filename(const std::string& image_id, std::size_t step, std::int64_t token,
                             const Vocabulary& vocab);

// Blends each overlay onto `picture` ([3, S, S] in [0, 1]) and writes one
// PPM per map into `dir`. Returns the written paths.
std::vector<std::string> write_overlays(const std::string& dir, const std::string& image_id, const Tensor& picture,
                                        const std::vector<AttentionMap>& maps, const Vocabulary& vocab);

}  // namespace bicap
