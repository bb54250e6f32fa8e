#include <cmath>
#include <limits>
#include <numeric>

#include "bicap/ops.hpp"

namespace bicap::ops {

namespace {

// Row max with the -inf / NaN contract: NaN and +inf are rejected, a row
// of only -inf is degenerate.
template <class T>
double checked_row_max(const T* row, std::size_t n, const char* op) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = row[i];
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
    mx = std::max(mx, v);
  }
  if (mx == -std::numeric_limits<double>::infinity()) {
    throw NumericError(std::string(op) + ": every entry of a row is -inf");
  }
  return mx;
}

// Softmax of each row into `probs`; returns per-row log-sum-exp.
template <class T>
std::vector<double> row_softmax(std::span<const T> x, std::size_t n, std::vector<double>& probs,
                                const char* op) {
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  probs.assign(x.size(), 0.0);
  std::vector<double> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * n;
    const double mx = checked_row_max(p, n, op);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = std::exp(p[i] - mx);
      probs[r * n + i] = e;
      s += e;
    }
    for (std::size_t i = 0; i < n; ++i) probs[r * n + i] /= s;
    lse[r] = mx + std::log(s);
  }
  return lse;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const int r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("softmax: axis out of range");
  if (a != r - 1) {
    // Move the axis last, normalize, move it back.
    return transpose(softmax(transpose(x, a, r - 1), -1), a, r - 1);
  }
  const std::size_t n = x.dim(-1);
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    row_softmax<T>(x.data<T>(), n, *probs, "softmax");
    return Tensor::from_buffer<T>(x.shape(), std::vector<T>(probs->begin(), probs->end()));
  });
  detail::record(out, "softmax", {x}, [probs, n, shape = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      const auto& y = *probs;
      std::vector<T> gx(gy.size());
      for (std::size_t r0 = 0; r0 < gy.size(); r0 += n) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += gy[r0 + i] * y[r0 + i];
        for (std::size_t i = 0; i < n; ++i) gx[r0 + i] = static_cast<T>(y[r0 + i] * (gy[r0 + i] - dot));
      }
      return Tensor::from_buffer<T>(shape, std::move(gx));
    })};
  });
  return out;
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input");
  const std::size_t n = x.dim(-1);
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto xd = x.data<T>();
    const auto lse = row_softmax<T>(xd, n, *probs, "log_softmax");
    std::vector<T> y(xd.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(xd[i] - lse[i / n]);
    return Tensor::from_buffer<T>(x.shape(), std::move(y));
  });
  detail::record(out, "log_softmax", {x}, [probs, n, shape = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      const auto& p = *probs;
      std::vector<T> gx(gy.size());
      for (std::size_t r0 = 0; r0 < gy.size(); r0 += n) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += gy[r0 + i];
        for (std::size_t i = 0; i < n; ++i) gx[r0 + i] = static_cast<T>(gy[r0 + i] - p[r0 + i] * s);
      }
      return Tensor::from_buffer<T>(shape, std::move(gx));
    })};
  });
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::int64_t> targets,
                            std::int64_t ignore_id) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy_logits: scalar logits");
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = v == 0 ? 0 : logits.numel() / v;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
  }
  std::size_t counted = 0;
  for (auto t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy_logits: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    ++counted;
  }
  if (counted == 0) throw NumericError("cross_entropy_logits: every position is ignored");

  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.data<T>();
    std::vector<double> row_probs;
    double total = 0.0;
    probs->assign(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      if (tgt[r] == ignore_id) continue;
      std::span<const T> row(x.data() + r * v, v);
      const auto lse = row_softmax<T>(row, v, row_probs, "cross_entropy_logits");
      const double lt = row[static_cast<std::size_t>(tgt[r])];
      if (!std::isfinite(lt)) throw NumericError("cross_entropy_logits: target logit is -inf");
      total += lse[0] - lt;
      std::copy(row_probs.begin(), row_probs.end(), probs->begin() + static_cast<std::ptrdiff_t>(r * v));
    }
    return Tensor::scalar(total / static_cast<double>(counted), logits.dtype());
  });
  detail::record(out, "cross_entropy_logits", {logits},
                 [probs, tgt, ignore_id, v, rows, counted, shape = logits.shape()](const Tensor& g) {
                   return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
                     const double scale = g.item() / static_cast<double>(counted);
                     std::vector<T> gx(rows * v, T{0});
                     for (std::size_t r = 0; r < rows; ++r) {
                       if (tgt[r] == ignore_id) continue;
                       for (std::size_t i = 0; i < v; ++i) gx[r * v + i] = static_cast<T>(scale * (*probs)[r * v + i]);
                       gx[r * v + static_cast<std::size_t>(tgt[r])] -= static_cast<T>(scale);
                     }
                     return Tensor::from_buffer<T>(shape, std::move(gx));
                   })};
                 });
  return out;
}

Tensor kl_div_logits(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape() || logits.rank() < 1) {
    throw DimensionError("kl_div_logits: logits " + shape_str(logits.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = logits.numel() / v;
  if (rows == 0) throw NumericError("kl_div_logits: empty batch");
  const auto q = target.to_vector();
  for (double qi : q)
    if (qi < 0 || !std::isfinite(qi)) throw ParameterError("kl_div_logits: target must be a distribution");

  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = dispatch(logits.dtype(), [&]<class T>() {
    auto x = logits.data<T>();
    const auto lse = row_softmax<T>(x, v, *probs, "kl_div_logits");
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < v; ++i) {
        const double qi = q[r * v + i];
        if (qi == 0.0) continue;
        const double logp = x[r * v + i] - lse[r];
        if (!std::isfinite(logp)) throw NumericError("kl_div_logits: target mass on a -inf logit");
        total += qi * (std::log(qi) - logp);
      }
    return Tensor::scalar(total / static_cast<double>(rows), logits.dtype());
  });
  detail::record(out, "kl_div_logits", {logits},
                 [probs, q, v, rows, shape = logits.shape()](const Tensor& g) {
                   return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
                     const double scale = g.item() / static_cast<double>(rows);
                     std::vector<T> gx(rows * v);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mass = 0.0;
                       for (std::size_t i = 0; i < v; ++i) mass += q[r * v + i];
                       for (std::size_t i = 0; i < v; ++i)
                         gx[r * v + i] = static_cast<T>(scale * ((*probs)[r * v + i] * mass - q[r * v + i]));
                     }
                     return Tensor::from_buffer<T>(shape, std::move(gx));
                   })};
                 });
  return out;
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, H]");
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for shape " +
                         shape_str(ids_shape));
  }
  const std::size_t vocab = table.dim(0), h = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(h);
  std::vector<std::int64_t> id_copy(ids.begin(), ids.end());
  Tensor out = dispatch(table.dtype(), [&]<class T>() {
    auto t = table.data<T>();
    std::vector<T> y(id_copy.size() * h);
    for (std::size_t i = 0; i < id_copy.size(); ++i) {
      const T* src = t.data() + static_cast<std::size_t>(id_copy[i]) * h;
      std::copy(src, src + h, y.data() + i * h);
    }
    return Tensor::from_buffer<T>(out_shape, std::move(y));
  });
  detail::record(out, "embedding", {table}, [id_copy, vocab, h](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      std::vector<T> gt(vocab * h, T{0});
      for (std::size_t i = 0; i < id_copy.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(id_copy[i]) * h;
        for (std::size_t j = 0; j < h; ++j) dst[j] += gy[i * h + j];
      }
      return Tensor::from_buffer<T>({vocab, h}, std::move(gt));
    })};
  });
  return out;
}

Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  if (rng == nullptr) throw ParameterError("dropout: training mode needs an rng");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (auto& m : *mask) m = unit(*rng) < p ? 0.0 : keep_scale;
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    auto d = x.data<T>();
    std::vector<T> y(d.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(d[i] * (*mask)[i]);
    return Tensor::from_buffer<T>(x.shape(), std::move(y));
  });
  detail::record(out, "dropout", {x}, [mask](const Tensor& g) {
    return std::vector<Tensor>{dispatch(g.dtype(), [&]<class T>() {
      auto gy = g.data<T>();
      std::vector<T> gx(gy.size());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = static_cast<T>(gy[i] * (*mask)[i]);
      return Tensor::from_buffer<T>(g.shape(), std::move(gx));
    })};
  });
  return out;
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double eps) {
  if (!(eps > 0.0)) throw ParameterError("grad_check: eps must be positive");
  for (auto& t : inputs) {
    t = t.clone();
    t.set_requires_grad(true);
  }
  Tensor y = f(inputs);
  if (y.numel() != 1) throw DimensionError("grad_check: function must be scalar-valued");
  backward(y);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& t : inputs) {
    const auto analytic = t.has_grad() ? t.grad().to_vector() : std::vector<double>(t.numel(), 0.0);
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.mutable_data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) {
        const T orig = d[i];
        d[i] = static_cast<T>(orig + eps);
        const double up = f(inputs).item();
        d[i] = static_cast<T>(orig - eps);
        const double down = f(inputs).item();
        d[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
      }
    });
  }
  return worst;
}

}  // namespace bicap::ops
