#pragma once

#include <random>
#include <string>
#include <vector>

#include "bicap/nn.hpp"

namespace bicap {

enum class BlockKind { basic, bottleneck };
BlockKind parse_block_kind(const std::string& name);
std::string block_kind_name(BlockKind kind);

struct BackboneConfig {
  BlockKind block = BlockKind::basic;
  std::vector<std::size_t> widths{32, 64, 128, 256};
  std::vector<std::size_t> blocks{2, 2, 2, 2};
  std::size_t stem_width = 0;  // 0: widths[0]
  std::size_t stem_kernel = 3;
  bool stem_pool = false;
  std::size_t image_size = 64;
  std::size_t grid = 4;

  std::size_t expansion() const { return block == BlockKind::bottleneck ? 4 : 1; }
  std::size_t feature_width() const { return widths.empty() ? 0 : widths.back() * expansion(); }
  // Stem stride 2, optional pool stride 2, stride 2 at every stage after the first.
  std::size_t total_stride() const;
  // Trainable parameter count implied by the configuration.
  std::size_t parameter_count() const;
  // Throws ConfigError on inconsistent geometry.
  void validate() const;
  // Same shape family at paper scale: bottleneck, 224 input, 7x7 grid of 2048.
  static BackboneConfig resnet50();
  BackboneConfig widened(std::size_t factor) const;
};

/// Residual convolutional network.
///
/// Stem conv -> BN -> ReLU (-> max pool), then stages of basic or bottleneck
/// blocks with projection shortcuts where shape changes.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, std::mt19937_64& rng, DType dtype = DType::f32);

  // images [B, 3, S, S] -> grid [B, G*G, D_I], flattened row-major over (row, col).
  Tensor forward_features(const Tensor& images, bool training) const;
  // Mean over grid positions: [B, D_I].
  Tensor pooled_features(const Tensor& images, bool training) const;

  void collect(const std::string& prefix, nn::ParamList& out) const;
  void collect_buffers(const std::string& prefix, nn::BufferList& out) const;
  const BackboneConfig& config() const { return config_; }

 private:
  struct Block {
    nn::Conv2d conv1, conv2, conv3;
    nn::BatchNorm2d bn1, bn2, bn3;
    nn::Conv2d down;
    nn::BatchNorm2d down_bn;
    bool bottleneck = false;
    bool has_down = false;
  };
  Tensor block_forward(const Block& b, const Tensor& x, bool training) const;

  BackboneConfig config_;
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<std::vector<Block>> stages_;
};

}  // namespace bicap
