#pragma once

#include <random>
#include <string>
#include <vector>

#include "bicap/ops.hpp"
#include "bicap/tensor.hpp"

namespace bicap::nn {

struct ParamRef {
  std::string name;
  Tensor tensor;  // shares storage with the owning layer
  bool decay = true;
};
using ParamList = std::vector<ParamRef>;

// Non-trainable state saved with the model (batch-norm running statistics).
struct BufferRef {
  std::string name;
  Tensor tensor;
};
using BufferList = std::vector<BufferRef>;

Tensor make_param(Tensor t);

// x[..., in] -> x[..., out]; weight stored [in, out].
struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, double init_std, std::mt19937_64& rng, DType dtype);
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct Conv2d {
  Tensor weight;
  std::size_t stride = 1, padding = 0;

  Conv2d() = default;
  // He-normal initialization, no bias.
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
         std::mt19937_64& rng, DType dtype);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight, Tensor{}, {stride, padding}); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BatchNorm2d {
  Tensor gain, bias;
  mutable Tensor running_mean, running_var;

  BatchNorm2d() = default;
  BatchNorm2d(std::size_t channels, DType dtype);
  Tensor forward(const Tensor& x, bool training) const;
  void collect(const std::string& prefix, ParamList& out) const;
  void collect_buffers(const std::string& prefix, BufferList& out) const;
};

struct LayerNorm {
  Tensor gain, bias;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(std::size_t width, DType dtype);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias, eps); }
  void collect(const std::string& prefix, ParamList& out) const;
};

std::size_t count_parameters(const ParamList& params);

}  // namespace bicap::nn
