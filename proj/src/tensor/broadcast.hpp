#pragma once

#include <string>
#include <vector>

#include "bicap/tensor.hpp"

namespace bicap::detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                           shape_str(b) + " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Element strides of `in` laid over `out`, zero along broadcast dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (n == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1];
  const std::size_t ib_step = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t base = 0; base < n; base += inner) {
    std::size_t a = ia, b = ib;
    for (std::size_t j = 0; j < inner; ++j, a += ia_step, b += ib_step) f(base + j, a, b);
    // advance the outer multi-index
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace bicap::detail
