#include <algorithm>
#include <limits>

#include "bicap/ops.hpp"
#include "broadcast.hpp"
#include "gemm.hpp"

namespace bicap::ops {

namespace {

std::string pair_str(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + pair_str(a, b));
  }
  if (a.dtype() != b.dtype()) throw ParameterError("matmul: dtype mismatch");
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + pair_str(a, b));
  }

  if (b.rank() == 2) {
    // Fold all leading dims of `a` into rows.
    const std::size_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out = dispatch(a.dtype(), [&]<class T>() {
      std::vector<T> c(rows * n);
      detail::gemm<T>(false, false, rows, n, k, a.data<T>().data(), b.data<T>().data(), c.data(),
                      false);
      return Tensor::from_buffer<T>(out_shape, std::move(c));
    });
    detail::record(out, "matmul", {a, b},
                   [ad = a.detach(), bd = b.detach(), rows, n, k, ra = a.requires_grad(),
                    rb = b.requires_grad()](const Tensor& g) {
                     std::vector<Tensor> grads(2);
                     dispatch(g.dtype(), [&]<class T>() {
                       if (ra) {
                         std::vector<T> ga(rows * k);
                         detail::gemm<T>(false, true, rows, k, n, g.data<T>().data(),
                                         bd.data<T>().data(), ga.data(), false);
                         grads[0] = Tensor::from_buffer<T>(ad.shape(), std::move(ga));
                       }
                       if (rb) {
                         std::vector<T> gb(k * n);
                         detail::gemm<T>(true, false, k, n, rows, ad.data<T>().data(),
                                         g.data<T>().data(), gb.data(), false);
                         grads[1] = Tensor::from_buffer<T>(bd.shape(), std::move(gb));
                       }
                     });
                     return grads;
                   });
    return out;
  }

  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  const auto sa = detail::broadcast_strides(a_batch, batch);
  const auto sb = detail::broadcast_strides(b_batch, batch);
  std::vector<std::size_t> a_off, b_off;
  detail::for_each_broadcast(batch, sa, sb, [&](std::size_t, std::size_t i, std::size_t j) {
    a_off.push_back(i * m * k);
    b_off.push_back(j * k * n);
  });
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  Tensor out = dispatch(a.dtype(), [&]<class T>() {
    std::vector<T> c(a_off.size() * m * n);
    const T* ap = a.data<T>().data();
    const T* bp = b.data<T>().data();
    for (std::size_t i = 0; i < a_off.size(); ++i)
      detail::gemm<T>(false, false, m, n, k, ap + a_off[i], bp + b_off[i], c.data() + i * m * n,
                      false);
    return Tensor::from_buffer<T>(out_shape, std::move(c));
  });
  detail::record(out, "matmul", {a, b},
                 [ad = a.detach(), bd = b.detach(), a_off, b_off, m, n, k,
                  ra = a.requires_grad(), rb = b.requires_grad()](const Tensor& g) {
                   std::vector<Tensor> grads(2);
                   dispatch(g.dtype(), [&]<class T>() {
                     const T* gp = g.data<T>().data();
                     if (ra) {
                       std::vector<T> ga(ad.numel(), T{0});
                       for (std::size_t i = 0; i < a_off.size(); ++i)
                         detail::gemm<T>(false, true, m, k, n, gp + i * m * n,
                                         bd.data<T>().data() + b_off[i], ga.data() + a_off[i], true);
                       grads[0] = Tensor::from_buffer<T>(ad.shape(), std::move(ga));
                     }
                     if (rb) {
                       std::vector<T> gb(bd.numel(), T{0});
                       for (std::size_t i = 0; i < a_off.size(); ++i)
                         detail::gemm<T>(true, false, k, n, m, ad.data<T>().data() + a_off[i],
                                         gp + i * m * n, gb.data() + b_off[i], true);
                       grads[1] = Tensor::from_buffer<T>(bd.shape(), std::move(gb));
                     }
                   });
                   return grads;
                 });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [in, out]");
  if (x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input width " + std::to_string(x.dim(-1)) +
                         " does not match weight " + shape_str(weight.shape()));
  }
  Tensor y = matmul(x, weight);
  if (!bias.defined()) return y;
  if (bias.shape() != Shape{weight.dim(1)}) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) + " for weight " +
                         shape_str(weight.shape()));
  }
  return add(y, bias);
}

// ---------------------------------------------------------------------------
// Convolution via im2col.

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, stride, pad;
  std::size_t out_h, out_w;
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        const T* plane = x + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                          ? T{0}
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        T* plane = x + c * g.height * g.width;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + j) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width))
              dst[static_cast<std::size_t>(iw)] += src[ow];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected input [B,C,H,W] and weight [Cout,C,kh,kw], got " +
                         pair_str(input, weight));
  }
  if (input.dtype() != weight.dtype()) throw ParameterError("conv2d: dtype mismatch");
  if (options.stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                   weight.dim(0), weight.dim(2), weight.dim(3), options.stride,
                   options.padding, 0, 0};
  if (weight.dim(1) != geo.channels) {
    throw DimensionError("conv2d: channel mismatch between " + pair_str(input, weight));
  }
  if (geo.kh > geo.height + 2 * geo.pad || geo.kw > geo.width + 2 * geo.pad) {
    throw DimensionError("conv2d: kernel larger than padded input for " +
                         pair_str(input, weight));
  }
  if (bias.defined() && bias.shape() != Shape{geo.out_channels}) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  geo.out_h = (geo.height + 2 * geo.pad - geo.kh) / geo.stride + 1;
  geo.out_w = (geo.width + 2 * geo.pad - geo.kw) / geo.stride + 1;
  const Shape out_shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w};

  Tensor out = dispatch(input.dtype(), [&]<class T>() {
    const T* x = input.data<T>().data();
    const T* w = weight.data<T>().data();
    const std::size_t rows = geo.col_rows(), cols = geo.col_cols();
    std::vector<T> y(shape_numel(out_shape));
    std::vector<T> col(geo.pointwise() ? 0 : rows * cols);
    for (std::size_t b = 0; b < geo.batch; ++b) {
      const T* xb = x + b * geo.channels * geo.height * geo.width;
      const T* cb = xb;
      if (!geo.pointwise()) {
        im2col(xb, geo, col.data());
        cb = col.data();
      }
      T* yb = y.data() + b * geo.out_channels * cols;
      detail::gemm<T>(false, false, geo.out_channels, cols, rows, w, cb, yb, false);
      if (bias.defined()) {
        auto bv = bias.data<T>();
        for (std::size_t o = 0; o < geo.out_channels; ++o)
          for (std::size_t p = 0; p < cols; ++p) yb[o * cols + p] += bv[o];
      }
    }
    return Tensor::from_buffer<T>(out_shape, std::move(y));
  });

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  detail::record(
      out, "conv2d", inputs,
      [xd = input.detach(), wd = weight.detach(), geo, has_bias = bias.defined(),
       rx = input.requires_grad(), rw = weight.requires_grad(),
       rbias = bias.defined() && bias.requires_grad()](const Tensor& g) {
        std::vector<Tensor> grads(has_bias ? 3 : 2);
        dispatch(g.dtype(), [&]<class T>() {
          const T* x = xd.data<T>().data();
          const T* w = wd.data<T>().data();
          const T* gy = g.data<T>().data();
          const std::size_t rows = geo.col_rows(), cols = geo.col_cols();
          const std::size_t in_plane = geo.channels * geo.height * geo.width;
          std::vector<T> gx(rx ? xd.numel() : 0, T{0});
          std::vector<T> gw(rw ? wd.numel() : 0, T{0});
          std::vector<T> gb(rbias ? geo.out_channels : 0, T{0});
          std::vector<T> col(geo.pointwise() ? 0 : rows * cols);
          std::vector<T> gcol(rx && !geo.pointwise() ? rows * cols : 0);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            const T* gyb = gy + b * geo.out_channels * cols;
            if (rw) {
              const T* cb = x + b * in_plane;
              if (!geo.pointwise()) {
                im2col(x + b * in_plane, geo, col.data());
                cb = col.data();
              }
              detail::gemm<T>(false, true, geo.out_channels, rows, cols, gyb, cb, gw.data(), true);
            }
            if (rx) {
              if (geo.pointwise()) {
                detail::gemm<T>(true, false, rows, cols, geo.out_channels, w, gyb,
                                gx.data() + b * in_plane, true);
              } else {
                detail::gemm<T>(true, false, rows, cols, geo.out_channels, w, gyb, gcol.data(),
                                false);
                col2im_add(gcol.data(), geo, gx.data() + b * in_plane);
              }
            }
            if (rbias) {
              for (std::size_t o = 0; o < geo.out_channels; ++o) {
                T acc{0};
                for (std::size_t p = 0; p < cols; ++p) acc += gyb[o * cols + p];
                gb[o] += acc;
              }
            }
          }
          if (rx) grads[0] = Tensor::from_buffer<T>(xd.shape(), std::move(gx));
          if (rw) grads[1] = Tensor::from_buffer<T>(wd.shape(), std::move(gw));
          if (rbias) grads[2] = Tensor::from_buffer<T>({geo.out_channels}, std::move(gb));
        });
        return grads;
      });
  return out;
}

Tensor max_pool2d(const Tensor& input, Pool2dOptions options) {
  if (input.rank() != 4) throw DimensionError("max_pool2d: expected [B,C,H,W]");
  if (options.stride < 1 || options.kernel < 1) throw ParameterError("max_pool2d: bad geometry");
  const std::size_t bc = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t k = options.kernel, s = options.stride, p = options.padding;
  if (k > h + 2 * p || k > w + 2 * p) throw DimensionError("max_pool2d: kernel exceeds input");
  if (p * 2 > k) throw ParameterError("max_pool2d: padding must be at most half the kernel");
  const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;
  const Shape out_shape{input.dim(0), input.dim(1), oh, ow};
  auto argmax = std::make_shared<std::vector<std::size_t>>(bc * oh * ow);

  Tensor out = dispatch(input.dtype(), [&]<class T>() {
    auto x = input.data<T>();
    std::vector<T> y(bc * oh * ow);
    for (std::size_t plane = 0; plane < bc; ++plane)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t di = 0; di < k; ++di)
            for (std::size_t dj = 0; dj < k; ++dj) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * s + di) - static_cast<std::ptrdiff_t>(p);
              const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(j * s + dj) - static_cast<std::ptrdiff_t>(p);
              if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(h) || c >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t idx = plane * h * w + static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c);
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          const std::size_t o = (plane * oh + i) * ow + j;
          y[o] = best;
          (*argmax)[o] = best_idx;
        }
    return Tensor::from_buffer<T>(out_shape, std::move(y));
  });
  detail::record(out, "max_pool2d", {input}, [argmax, in_shape = input.shape()](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      std::vector<T> gx(shape_numel(in_shape), T{0});
      for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
      return Tensor::from_buffer<T>(in_shape, std::move(gx));
    })};
  });
  return out;
}

}  // namespace bicap::ops
