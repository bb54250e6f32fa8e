#pragma once

#include <string>

#include "bicap/tensor.hpp"

// Images are f32 tensors [C, H, W] with values in [0, 1].
namespace bicap::image {

Tensor load_png(const std::string& path);
void save_png(const std::string& path, const Tensor& img);
// Binary P6 (3 channels) or P5 (1 channel).
void save_ppm(const std::string& path, const Tensor& img);
// PNG by extension, otherwise the tensor serialization format.
Tensor load(const std::string& path);

// Half-pixel-centre sampling, edge clamped.
Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w);
// Keys cubic kernel with a = -0.75; accepts [H, W] or [C, H, W].
Tensor resize_bicubic(const Tensor& img, std::size_t out_h, std::size_t out_w);

Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width);
Tensor hflip(const Tensor& img);
Tensor clamp01(const Tensor& img);

}  // namespace bicap::image
