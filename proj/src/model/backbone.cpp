#include "bicap/backbone.hpp"

#include "bicap/errors.hpp"

namespace bicap {

BlockKind parse_block_kind(const std::string& name) {
  if (name == "basic") return BlockKind::basic;
  if (name == "bottleneck") return BlockKind::bottleneck;
  throw ConfigError("unknown block kind '" + name + "' (expected basic or bottleneck)");
}

std::string block_kind_name(BlockKind kind) { return kind == BlockKind::basic ? "basic" : "bottleneck"; }

std::size_t BackboneConfig::total_stride() const {
  std::size_t s = 2 * (stem_pool ? 2 : 1);
  for (std::size_t i = 1; i < widths.size(); ++i) s *= 2;
  return s;
}

void BackboneConfig::validate() const {
  if (widths.empty()) throw ConfigError("backbone: no stages");
  if (blocks.size() != widths.size()) throw ConfigError("backbone: widths and blocks differ in length");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0 || blocks[i] == 0) throw ConfigError("backbone: zero width or block count");
  }
  if (stem_kernel == 0 || stem_kernel % 2 == 0) throw ConfigError("backbone: stem kernel must be odd");
  if (grid == 0 || image_size == 0) throw ConfigError("backbone: image size and grid must be positive");
  if (image_size % total_stride() != 0 || image_size / total_stride() != grid) {
    throw ConfigError("backbone: image size " + std::to_string(image_size) + " / grid " + std::to_string(grid) +
                      " does not match total stride " + std::to_string(total_stride()));
  }
}

std::size_t BackboneConfig::parameter_count() const {
  const std::size_t stem = stem_width ? stem_width : widths.at(0);
  const std::size_t e = expansion();
  std::size_t n = 3 * stem_kernel * stem_kernel * stem + 2 * stem;
  std::size_t in = stem;
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::size_t w = widths[s];
    for (std::size_t b = 0; b < blocks.at(s); ++b) {
      if (block == BlockKind::bottleneck) {
        n += in * w + 2 * w + w * w * 9 + 2 * w + w * w * e + 2 * w * e;
      } else {
        n += in * w * 9 + 2 * w + w * w * 9 + 2 * w;
      }
      if ((b == 0 && s > 0) || in != w * e) n += in * w * e + 2 * w * e;
      in = w * e;
    }
  }
  return n;
}

BackboneConfig BackboneConfig::resnet50() {
  BackboneConfig c;
  c.block = BlockKind::bottleneck;
  c.widths = {64, 128, 256, 512};
  c.blocks = {3, 4, 6, 3};
  c.stem_width = 64;
  c.stem_kernel = 7;
  c.stem_pool = true;
  c.image_size = 224;
  c.grid = 7;
  return c;
}

BackboneConfig BackboneConfig::widened(std::size_t factor) const {
  BackboneConfig c = *this;
  for (auto& w : c.widths) w *= factor;
  if (c.stem_width) c.stem_width *= factor;
  return c;
}

Backbone::Backbone(const BackboneConfig& config, std::mt19937_64& rng, DType dtype) : config_(config) {
  config_.validate();
  const std::size_t stem_out = config_.stem_width ? config_.stem_width : config_.widths[0];
  stem_ = nn::Conv2d(3, stem_out, config_.stem_kernel, 2, config_.stem_kernel / 2, rng, dtype);
  stem_bn_ = nn::BatchNorm2d(stem_out, dtype);
  std::size_t in = stem_out;
  const std::size_t e = config_.expansion();
  for (std::size_t s = 0; s < config_.widths.size(); ++s) {
    const std::size_t w = config_.widths[s];
    std::vector<Block> stage;
    for (std::size_t b = 0; b < config_.blocks[s]; ++b) {
      const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
      Block blk;
      blk.bottleneck = config_.block == BlockKind::bottleneck;
      if (blk.bottleneck) {
        blk.conv1 = nn::Conv2d(in, w, 1, 1, 0, rng, dtype);
        blk.bn1 = nn::BatchNorm2d(w, dtype);
        blk.conv2 = nn::Conv2d(w, w, 3, stride, 1, rng, dtype);
        blk.bn2 = nn::BatchNorm2d(w, dtype);
        blk.conv3 = nn::Conv2d(w, w * e, 1, 1, 0, rng, dtype);
        blk.bn3 = nn::BatchNorm2d(w * e, dtype);
      } else {
        blk.conv1 = nn::Conv2d(in, w, 3, stride, 1, rng, dtype);
        blk.bn1 = nn::BatchNorm2d(w, dtype);
        blk.conv2 = nn::Conv2d(w, w, 3, 1, 1, rng, dtype);
        blk.bn2 = nn::BatchNorm2d(w, dtype);
      }
      if (stride != 1 || in != w * e) {
        blk.has_down = true;
        blk.down = nn::Conv2d(in, w * e, 1, stride, 0, rng, dtype);
        blk.down_bn = nn::BatchNorm2d(w * e, dtype);
      }
      in = w * e;
      stage.push_back(std::move(blk));
    }
    stages_.push_back(std::move(stage));
  }
}

Tensor Backbone::block_forward(const Block& b, const Tensor& x, bool training) const {
  Tensor h = ops::relu(b.bn1.forward(b.conv1.forward(x), training));
  if (b.bottleneck) {
    h = ops::relu(b.bn2.forward(b.conv2.forward(h), training));
    h = b.bn3.forward(b.conv3.forward(h), training);
  } else {
    h = b.bn2.forward(b.conv2.forward(h), training);
  }
  const Tensor shortcut = b.has_down ? b.down_bn.forward(b.down.forward(x), training) : x;
  return ops::relu(ops::add(h, shortcut));
}

Tensor Backbone::forward_features(const Tensor& images, bool training) const {
  const std::size_t s = config_.image_size;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s) {
    throw DimensionError("backbone: expected images [B,3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                         shape_str(images.shape()));
  }
  Tensor x = ops::relu(stem_bn_.forward(stem_.forward(images), training));
  if (config_.stem_pool) x = ops::max_pool2d(x);
  for (const auto& stage : stages_)
    for (const auto& blk : stage) x = block_forward(blk, x, training);
  const std::size_t batch = x.dim(0), channels = x.dim(1), g = config_.grid;
  if (x.dim(2) != g || x.dim(3) != g) {
    throw DimensionError("backbone: produced grid " + shape_str(x.shape()) + ", expected side " + std::to_string(g));
  }
  return ops::permute(ops::reshape(x, {batch, channels, g * g}), {0, 2, 1});
}

Tensor Backbone::pooled_features(const Tensor& images, bool training) const {
  return ops::mean_axis(forward_features(images, training), 1);
}

void Backbone::collect(const std::string& prefix, nn::ParamList& out) const {
  stem_.collect(prefix + ".stem.conv", out);
  stem_bn_.collect(prefix + ".stem.bn", out);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const auto& blk = stages_[s][b];
      const std::string p = prefix + ".stage" + std::to_string(s + 1) + "." + std::to_string(b);
      blk.conv1.collect(p + ".conv1", out);
      blk.bn1.collect(p + ".bn1", out);
      blk.conv2.collect(p + ".conv2", out);
      blk.bn2.collect(p + ".bn2", out);
      if (blk.bottleneck) {
        blk.conv3.collect(p + ".conv3", out);
        blk.bn3.collect(p + ".bn3", out);
      }
      if (blk.has_down) {
        blk.down.collect(p + ".down.conv", out);
        blk.down_bn.collect(p + ".down.bn", out);
      }
    }
  }
}

void Backbone::collect_buffers(const std::string& prefix, nn::BufferList& out) const {
  stem_bn_.collect_buffers(prefix + ".stem.bn", out);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      const auto& blk = stages_[s][b];
      const std::string p = prefix + ".stage" + std::to_string(s + 1) + "." + std::to_string(b);
      blk.bn1.collect_buffers(p + ".bn1", out);
      blk.bn2.collect_buffers(p + ".bn2", out);
      if (blk.bottleneck) blk.bn3.collect_buffers(p + ".bn3", out);
      if (blk.has_down) blk.down_bn.collect_buffers(p + ".down.bn", out);
    }
  }
}

}  // namespace bicap
