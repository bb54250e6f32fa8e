#include <cmath>
#include <numeric>

#include "bicap/ops.hpp"
#include "broadcast.hpp"

namespace bicap::ops {

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ParameterError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                         " vs " + dtype_name(b.dtype()) + ")");
  }
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_dtype(a, b, op);
  const Shape out_shape = detail::broadcast_shapes(a.shape(), b.shape(), op);
  return dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    std::vector<T> out(shape_numel(out_shape));
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    } else if (a.shape() == out_shape && y.size() == 1) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[0]);
    } else {
      detail::for_each_broadcast(out_shape, detail::broadcast_strides(a.shape(), out_shape),
                                 detail::broadcast_strides(b.shape(), out_shape),
                                 [&](std::size_t o, std::size_t i, std::size_t j) {
                                   out[o] = f(x[i], y[j]);
                                 });
    }
    return Tensor::from_buffer<T>(out_shape, std::move(out));
  });
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  return dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = f(d[i]);
    return Tensor::from_buffer<T>(x.shape(), std::move(out));
  });
}

// Broadcasts x to `shape` (inverse of sum_to).
Tensor expand_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> out(shape_numel(shape));
    const auto sx = detail::broadcast_strides(x.shape(), shape);
    detail::for_each_broadcast(shape, sx, sx,
                               [&](std::size_t o, std::size_t i, std::size_t) { out[o] = d[i]; });
    return Tensor::from_buffer<T>(shape, std::move(out));
  });
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = binary(a, b, "add", [](auto x, auto y) { return x + y; });
  detail::record(out, "add", {a, b}, [as = a.shape(), bs = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, as), sum_to(g, bs)};
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = binary(a, b, "sub", [](auto x, auto y) { return x - y; });
  detail::record(out, "sub", {a, b}, [as = a.shape(), bs = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to(g, as), scale(sum_to(g, bs), -1.0)};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = binary(a, b, "mul", [](auto x, auto y) { return x * y; });
  detail::record(out, "mul", {a, b},
                 [ad = a.detach(), bd = b.detach(), ra = a.requires_grad(),
                  rb = b.requires_grad()](const Tensor& g) {
                   std::vector<Tensor> grads(2);
                   if (ra) grads[0] = sum_to(mul(g, bd), ad.shape());
                   if (rb) grads[1] = sum_to(mul(g, ad), bd.shape());
                   return grads;
                 });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T f = static_cast<T>(factor);
    return unary(x, [f](T v) { return v * f; });
  });
  detail::record(out, "scale", {x}, [factor](const Tensor& g) {
    return std::vector<Tensor>{scale(g, factor)};
  });
  return out;
}

Tensor add_scalar(const Tensor& x, double value) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T c = static_cast<T>(value);
    return unary(x, [c](T v) { return v + c; });
  });
  detail::record(out, "add_scalar", {x}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = unary(x, [](auto v) { return v > 0 ? v : decltype(v){0}; });
  detail::record(out, "relu", {x}, [xd = x.detach()](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gx = g.data<T>();
      auto xv = xd.data<T>();
      std::vector<T> r(gx.size());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = xv[i] > 0 ? gx[i] : T{0};
      return Tensor::from_buffer<T>(g.shape(), std::move(r));
    })};
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = unary(x, [](auto v) {
    using T = decltype(v);
    return static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
  });
  detail::record(out, "gelu", {x}, [xd = x.detach()](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gx = g.data<T>();
      auto xv = xd.data<T>();
      std::vector<T> r(gx.size());
      const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
      for (std::size_t i = 0; i < r.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        r[i] = static_cast<T>(gx[i] * (cdf + v * pdf));
      }
      return Tensor::from_buffer<T>(g.shape(), std::move(r));
    })};
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    double acc = 0.0;
    for (auto v : d) acc += v;
    return Tensor::scalar(acc, x.dtype());
  });
  detail::record(out, "sum", {x}, [s = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(s, g.item(), g.dtype())};
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw NumericError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t a = normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  const std::size_t outer = std::accumulate(s.begin(), s.begin() + a, std::size_t{1},
                                            std::multiplies<>());
  const std::size_t n = s[a];
  const std::size_t inner = std::accumulate(s.begin() + a + 1, s.end(), std::size_t{1},
                                            std::multiplies<>());
  Shape kept = s;
  kept[a] = 1;
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> r(outer * inner, T{0});
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k) {
        const T* src = d.data() + (o * n + k) * inner;
        T* dst = r.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    return Tensor::from_buffer<T>(kept, std::move(r));
  });
  detail::record(out, "sum_axis", {x}, [s, kept](const Tensor& g) {
    return std::vector<Tensor>{expand_to(g.view(kept), s)};
  });
  if (keepdim) return out;
  Shape squeezed = s;
  squeezed.erase(squeezed.begin() + static_cast<std::ptrdiff_t>(a));
  return reshape(out, squeezed);
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  const std::size_t n = x.dim(axis);
  if (n == 0) throw NumericError("mean over an empty axis");
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  // validates that `shape` broadcasts to x
  if (detail::broadcast_shapes(shape, x.shape(), "sum_to") != x.shape()) {
    throw DimensionError("sum_to: " + shape_str(x.shape()) + " cannot reduce to " +
                         shape_str(shape));
  }
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> r(shape_numel(shape), T{0});
    const auto st = detail::broadcast_strides(shape, x.shape());
    detail::for_each_broadcast(x.shape(), st, st,
                               [&](std::size_t i, std::size_t o, std::size_t) { r[o] += d[i]; });
    return Tensor::from_buffer<T>(shape, std::move(r));
  });
  detail::record(out, "sum_to", {x}, [s = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{expand_to(g, s)};
  });
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  Tensor out = x.view(shape);
  detail::record(out, "reshape", {x}, [s = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{g.view(s)};
  });
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw DimensionError("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order");
    seen[o] = true;
  }
  const auto& s = x.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[order[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  std::vector<std::size_t> gather(r);
  for (std::size_t i = 0; i < r; ++i) gather[i] = in_strides[order[i]];

  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> res(d.size());
    detail::for_each_broadcast(out_shape, gather, gather,
                               [&](std::size_t o, std::size_t i, std::size_t) { res[o] = d[i]; });
    return Tensor::from_buffer<T>(out_shape, std::move(res));
  });
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[order[i]] = i;
  detail::record(out, "permute", {x}, [inverse](const Tensor& g) {
    return std::vector<Tensor>{permute(g, inverse)};
  });
  return out;
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[normalize_axis(axis0, x.rank())], order[normalize_axis(axis1, x.rank())]);
  return permute(x, order);
}

namespace {

template <class T>
std::vector<T> gather_rows(std::span<const T> d, std::size_t batch, std::size_t steps,
                           std::size_t inner, const std::vector<std::size_t>& index) {
  std::vector<T> out(d.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t) {
      const T* src = d.data() + (b * steps + index[b * steps + t]) * inner;
      std::copy(src, src + inner, out.data() + (b * steps + t) * inner);
    }
  return out;
}

}  // namespace

Tensor gather_time(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.rank() < 2) throw DimensionError("gather_time: need rank >= 2");
  const std::size_t batch = x.dim(0);
  const std::size_t steps = x.dim(1);
  const std::size_t inner = batch * steps == 0 ? 0 : x.numel() / (batch * steps);
  if (index.size() != batch * steps) {
    throw DimensionError("gather_time: index has " + std::to_string(index.size()) +
                         " entries for shape " + shape_str(x.shape()));
  }
  for (auto i : index)
    if (i >= steps) throw IndexError("gather_time: index " + std::to_string(i) + " >= " +
                                     std::to_string(steps));
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    return Tensor::from_buffer<T>(x.shape(), gather_rows<T>(x.data<T>(), batch, steps, inner, index));
  });
  detail::record(out, "gather_time", {x}, [index, batch, steps, inner](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gd = g.data<T>();
      std::vector<T> r(gd.size(), T{0});
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < steps; ++t) {
          const T* src = gd.data() + (b * steps + t) * inner;
          T* dst = r.data() + (b * steps + index[b * steps + t]) * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      return Tensor::from_buffer<T>(g.shape(), std::move(r));
    })};
  });
  return out;
}

}  // namespace bicap::ops
