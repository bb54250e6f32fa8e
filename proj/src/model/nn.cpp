#include "bicap/nn.hpp"

#include <cmath>

namespace bicap::nn {

Tensor make_param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, double init_std, std::mt19937_64& rng, DType dtype)
    : weight(make_param(Tensor::randn({in, out}, rng, 0.0, init_std, dtype))) {
  if (with_bias) bias = make_param(Tensor::zeros({out}, dtype));
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_,
               std::mt19937_64& rng, DType dtype)
    : weight(make_param(Tensor::randn({out, in, kernel, kernel}, rng, 0.0,
                                      std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)), dtype))),
      stride(stride_),
      padding(padding_) {}

void Conv2d::collect(const std::string& prefix, ParamList& out) const { out.push_back({prefix + ".weight", weight, true}); }

BatchNorm2d::BatchNorm2d(std::size_t channels, DType dtype)
    : gain(make_param(Tensor::ones({channels}, dtype))),
      bias(make_param(Tensor::zeros({channels}, dtype))),
      running_mean(Tensor::zeros({channels}, dtype)),
      running_var(Tensor::ones({channels}, dtype)) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) const {
  return ops::batch_norm2d(x, gain, bias, running_mean, running_var, {.training = training});
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gain", gain, false});
  out.push_back({prefix + ".bias", bias, false});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, BufferList& out) const {
  out.push_back({prefix + ".running_mean", running_mean});
  out.push_back({prefix + ".running_var", running_var});
}

LayerNorm::LayerNorm(std::size_t width, DType dtype)
    : gain(make_param(Tensor::ones({width}, dtype))), bias(make_param(Tensor::zeros({width}, dtype))) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gain", gain, false});
  out.push_back({prefix + ".bias", bias, false});
}

std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace bicap::nn
