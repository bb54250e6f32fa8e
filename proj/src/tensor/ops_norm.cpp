#include <cmath>

#include "bicap/ops.hpp"

namespace bicap::ops {

Tensor batch_norm2d(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    Tensor& running_mean, Tensor& running_var, BatchNormOptions options) {
  if (x.rank() != 4) throw DimensionError("batch_norm2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Shape per_channel{channels};
  for (const Tensor* t : {&gain, &bias, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->shape() != per_channel) {
      throw DimensionError("batch_norm2d: per-channel tensor shape " + shape_str(t->shape()) +
                           " for input " + shape_str(x.shape()));
    }
    if (t->dtype() != x.dtype()) throw ParameterError("batch_norm2d: dtype mismatch");
  }
  const std::size_t count = batch * plane;
  if (options.training && count < 2 && !options.allow_single_value) {
    throw NumericError("batch_norm2d: training mode needs more than one value per channel, got " +
                       shape_str(x.shape()));
  }
  if (options.eps <= 0 && count < 2) {
    throw NumericError("batch_norm2d: degenerate variance without eps guard");
  }

  auto xhat_store = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(channels);

  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto gd = gain.data<T>();
    auto bd = bias.data<T>();
    auto rm = running_mean.mutable_data<T>();
    auto rv = running_var.mutable_data<T>();
    std::vector<T> y(xd.size());
    for (std::size_t c = 0; c < channels; ++c) {
      double mu, var;
      if (options.training) {
        double s = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* p = xd.data() + (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        mu = s / static_cast<double>(count);
        double ss = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* p = xd.data() + (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
        }
        var = ss / static_cast<double>(count);
        const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
        rm[c] = static_cast<T>((1.0 - options.momentum) * rm[c] + options.momentum * mu);
        rv[c] = static_cast<T>((1.0 - options.momentum) * rv[c] + options.momentum * unbiased);
      } else {
        mu = rm[c];
        var = rv[c];
      }
      const double istd = 1.0 / std::sqrt(var + options.eps);
      (*inv_std)[c] = istd;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double h = (xd[off + i] - mu) * istd;
          (*xhat_store)[off + i] = h;
          y[off + i] = static_cast<T>(h * gd[c] + bd[c]);
        }
      }
    }
    return Tensor::from_buffer<T>(x.shape(), std::move(y));
  });

  detail::record(
      out, "batch_norm2d", {x, gain, bias},
      [xhat_store, inv_std, gd = gain.detach(), shape = x.shape(), batch, channels, plane, count,
       training = options.training](const Tensor& g) {
        std::vector<Tensor> grads(3);
        dispatch(g.dtype(), [&]<class T>() {
          auto gy = g.data<T>();
          auto gv = gd.data<T>();
          const auto& xh = *xhat_store;
          std::vector<T> gx(gy.size()), ggain(channels), gbias(channels);
          for (std::size_t c = 0; c < channels; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t off = (b * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                sum_g += gy[off + i];
                sum_gx += gy[off + i] * xh[off + i];
              }
            }
            ggain[c] = static_cast<T>(sum_gx);
            gbias[c] = static_cast<T>(sum_g);
            const double k = gv[c] * (*inv_std)[c];
            const double n = static_cast<double>(count);
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t off = (b * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                if (training) {
                  gx[off + i] = static_cast<T>(k * (gy[off + i] - sum_g / n - xh[off + i] * sum_gx / n));
                } else {
                  gx[off + i] = static_cast<T>(k * gy[off + i]);
                }
              }
            }
          }
          grads[0] = Tensor::from_buffer<T>(shape, std::move(gx));
          grads[1] = Tensor::from_buffer<T>({channels}, std::move(ggain));
          grads[2] = Tensor::from_buffer<T>({channels}, std::move(gbias));
        });
        return grads;
      });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t h = x.dim(-1);
  if (h == 0) throw DimensionError("layer_norm: normalized dimension is empty");
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
    throw DimensionError("layer_norm: gain/bias shape must be [" + std::to_string(h) + "]");
  }
  if (eps < 0) throw ParameterError("layer_norm: eps must be non-negative");
  const std::size_t rows = x.numel() / h;
  auto xhat_store = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);

  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    auto gd = gain.data<T>();
    auto bd = bias.data<T>();
    std::vector<T> y(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = xd.data() + r * h;
      double mu = 0.0;
      for (std::size_t i = 0; i < h; ++i) mu += p[i];
      mu /= static_cast<double>(h);
      double var = 0.0;
      for (std::size_t i = 0; i < h; ++i) var += (p[i] - mu) * (p[i] - mu);
      var /= static_cast<double>(h);
      if (var + eps <= 0.0) throw NumericError("layer_norm: zero variance row without eps guard");
      const double istd = 1.0 / std::sqrt(var + eps);
      (*inv_std)[r] = istd;
      for (std::size_t i = 0; i < h; ++i) {
        const double v = (p[i] - mu) * istd;
        (*xhat_store)[r * h + i] = v;
        y[r * h + i] = static_cast<T>(v * gd[i] + bd[i]);
      }
    }
    return Tensor::from_buffer<T>(x.shape(), std::move(y));
  });

  detail::record(out, "layer_norm", {x, gain, bias},
                 [xhat_store, inv_std, gd = gain.detach(), shape = x.shape(), rows, h](const Tensor& g) {
                   std::vector<Tensor> grads(3);
                   dispatch(g.dtype(), [&]<class T>() {
                     auto gy = g.data<T>();
                     auto gv = gd.data<T>();
                     const auto& xh = *xhat_store;
                     std::vector<T> gx(gy.size());
                     std::vector<double> ggain(h, 0.0), gbias(h, 0.0);
                     std::vector<double> dxhat(h);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t i = 0; i < h; ++i) {
                         const double gyi = gy[r * h + i];
                         ggain[i] += gyi * xh[r * h + i];
                         gbias[i] += gyi;
                         dxhat[i] = gyi * gv[i];
                         s1 += dxhat[i];
                         s2 += dxhat[i] * xh[r * h + i];
                       }
                       const double n = static_cast<double>(h);
                       for (std::size_t i = 0; i < h; ++i) {
                         gx[r * h + i] = static_cast<T>((*inv_std)[r] *
                                                        (dxhat[i] - s1 / n - xh[r * h + i] * s2 / n));
                       }
                     }
                     grads[0] = Tensor::from_buffer<T>(shape, std::move(gx));
                     grads[1] = Tensor::from_buffer<T>({h}, std::vector<T>(ggain.begin(), ggain.end()));
                     grads[2] = Tensor::from_buffer<T>({h}, std::vector<T>(gbias.begin(), gbias.end()));
                   });
                   return grads;
                 });
  return out;
}

}  // namespace bicap::ops
