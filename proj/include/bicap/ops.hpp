#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "bicap/tensor.hpp"

namespace bicap::ops {

// Elementwise, broadcasting over trailing dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor relu(const Tensor& x);
// x * Phi(x) with the exact erf form.
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);
// Sums broadcast dimensions away so the result has `shape`.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, int axis0, int axis1);
// Per-row reindexing along axis 1: out[b, t, ...] = x[b, index[b * T + t], ...].
Tensor gather_time(const Tensor& x, const std::vector<std::size_t>& index);

// a[..., m, k] x b[..., k, n] with broadcast batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
// Cross-correlation; bias may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options = {});

struct Pool2dOptions {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
};
Tensor max_pool2d(const Tensor& input, Pool2dOptions options = {});

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
  // Training with a single value per channel is rejected unless set.
  bool allow_single_value = false;
};
// Normalizes per channel of x[B, C, H, W]. In training mode the running
// statistics are updated in place (exponential moving average, unbiased
// variance); in eval mode they are used for normalization.
Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    Tensor& running_mean, Tensor& running_var, BatchNormOptions options = {});

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// -inf entries map to exactly 0; a row of only -inf is rejected.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);

// Mean of -log softmax(logits)[target] over rows whose target != ignore_id.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int64_t> targets,
                            std::int64_t ignore_id = -100);

// Mean over rows of KL(target || softmax(logits)); target rows are distributions.
Tensor kl_div_logits(const Tensor& logits, const Tensor& target);

// table[V, H] gathered by ids; result shape is ids_shape + [H].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape);

Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64* rng);

/// Central-difference gradient check.
///
/// Perturbs every coordinate of every input by +-eps, compares the numeric
/// slope against the autodiff gradient and returns the largest
/// |a - n| / max(|a|, |n|, 1e-12). Inputs should be f64.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double eps = 1e-5);

}  // namespace bicap::ops
