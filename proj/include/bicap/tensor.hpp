#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bicap/errors.hpp"

namespace bicap {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

// Calls f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

class Tensor;

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;
struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Buffer> data;
  std::shared_ptr<Buffer> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

/// Dense row-major array with an optional gradient slot.
///
/// Tensor is a handle: copies share storage and autograd state. Values are
/// treated as immutable once an op has produced them; the only in-place
/// writers are parameter initializers, optimizers and running statistics.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor ones(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from_vector(const Shape& shape, const std::vector<double>& values,
                            DType dtype = DType::f32);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double mean, double stddev,
                      DType dtype = DType::f32);
  static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                        DType dtype = DType::f32);

  template <class T>
  static Tensor from_buffer(const Shape& shape, std::vector<T> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();

  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient as a detached tensor sharing the grad buffer.
  Tensor grad() const;
  void zero_grad();
  void clear_grad();
  const std::shared_ptr<detail::Node>& grad_fn() const;

  // Shares storage, drops autograd history.
  Tensor detach() const;
  // Deep copy without autograd history.
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Reinterprets the same storage with a new shape (numel must match).
  Tensor view(const Shape& shape) const;

  bool shares_storage(const Tensor& other) const;
  const void* storage_id() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  void require_defined() const;
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  // Returns one gradient per input; undefined entries mean "no gradient".
  BackwardFn backward;
};

// Attaches a backward rule to `out` when grad mode is on and any input
// requires grad.
void record(Tensor& out, std::string name, std::vector<Tensor> inputs, BackwardFn backward);

template <class T>
std::vector<T>& buffer(const Tensor& t) {
  return std::get<std::vector<T>>(*t.impl()->data);
}

}  // namespace detail

template <class T>
Tensor Tensor::from_buffer(const Shape& shape, std::vector<T> values) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("from_buffer: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype_of<T>();
  impl->data = std::make_shared<detail::Buffer>(std::move(values));
  return Tensor(std::move(impl));
}

template <class T>
std::span<const T> Tensor::data() const {
  require_defined();
  if (dtype() != dtype_of<T>()) {
    throw ParameterError(std::string("tensor holds ") + dtype_name(dtype()) +
                         ", requested " + dtype_name(dtype_of<T>()));
  }
  const auto& v = std::get<std::vector<T>>(*impl_->data);
  return {v.data(), v.size()};
}

template <class T>
std::span<T> Tensor::mutable_data() {
  require_defined();
  if (dtype() != dtype_of<T>()) {
    throw ParameterError(std::string("tensor holds ") + dtype_name(dtype()) +
                         ", requested " + dtype_name(dtype_of<T>()));
  }
  auto& v = std::get<std::vector<T>>(*impl_->data);
  return {v.data(), v.size()};
}

// ---------------------------------------------------------------------------
// Autograd engine

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct BackwardOptions {
  // When false, leaf gradients reached by this pass are overwritten;
  // when true they are added to whatever is already stored.
  bool accumulate = false;
};

// Reverse-mode sweep from a scalar loss.
void backward(const Tensor& loss, BackwardOptions options = {});

// Operations reachable from `root`, inputs before consumers.
std::vector<std::shared_ptr<detail::Node>> topological_order(const Tensor& root);

// ---------------------------------------------------------------------------
// Serialization: u8 dtype tag, u32 rank, u64 dims[rank], little-endian data.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

}  // namespace bicap
