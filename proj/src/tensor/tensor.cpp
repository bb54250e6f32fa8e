#include "bicap/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace bicap {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

namespace {

std::shared_ptr<detail::Buffer> make_buffer(DType dtype, std::size_t n, double value) {
  if (dtype == DType::f32) {
    return std::make_shared<detail::Buffer>(std::vector<float>(n, static_cast<float>(value)));
  }
  return std::make_shared<detail::Buffer>(std::vector<double>(n, value));
}

Tensor make_tensor(const Shape& shape, DType dtype, std::shared_ptr<detail::Buffer> data) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return full(shape, 0.0, dtype); }

Tensor Tensor::ones(const Shape& shape, DType dtype) { return full(shape, 1.0, dtype); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  return make_tensor(shape, dtype, make_buffer(dtype, shape_numel(shape), value));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_vector(const Shape& shape, const std::vector<double>& values, DType dtype) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("from_vector: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  if (dtype == DType::f64) return from_buffer<double>(shape, values);
  return from_buffer<float>(shape, std::vector<float>(values.begin(), values.end()));
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double mean, double stddev,
                     DType dtype) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return from_vector(shape, v, dtype);
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                       DType dtype) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return from_vector(shape, v, dtype);
}

void Tensor::require_defined() const {
  if (!impl_) throw StateError("operation on an undefined tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return impl_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  require_defined();
  return impl_->dtype;
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return at(0);
}

double Tensor::at(std::size_t flat_index) const {
  if (flat_index >= numel()) throw IndexError("flat index out of range");
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[flat_index]); });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require_defined();
  if (impl_->grad_fn && !flag) {
    throw StateError("cannot clear requires_grad on a non-leaf tensor");
  }
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || !impl_->grad_fn; }

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return make_tensor(impl_->shape, impl_->dtype, impl_->grad);
}

void Tensor::zero_grad() {
  require_defined();
  impl_->grad = make_buffer(dtype(), numel(), 0.0);
}

void Tensor::clear_grad() {
  require_defined();
  impl_->grad.reset();
}

const std::shared_ptr<detail::Node>& Tensor::grad_fn() const {
  require_defined();
  return impl_->grad_fn;
}

Tensor Tensor::detach() const { return make_tensor(shape(), dtype(), impl_->data); }

Tensor Tensor::clone() const {
  return make_tensor(shape(), dtype(), std::make_shared<detail::Buffer>(*impl_->data));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  return from_vector(shape(), to_vector(), target);
}

Tensor Tensor::view(const Shape& new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("view: cannot reshape " + shape_str(shape()) + " to " +
                         shape_str(new_shape));
  }
  return make_tensor(new_shape, dtype(), impl_->data);
}

bool Tensor::shares_storage(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->data == other.impl_->data;
}

const void* Tensor::storage_id() const {
  require_defined();
  return impl_->data.get();
}

// ---------------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

void record(Tensor& out, std::string name, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!grad_enabled()) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return;
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

}  // namespace detail

namespace {

// Post-order over tensors: every tensor appears after the inputs it was built from.
std::vector<const detail::TensorImpl*> tensor_order(const Tensor& root,
                                                    std::unordered_map<const detail::TensorImpl*, Tensor>& handles) {
  std::vector<const detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  struct Frame {
    Tensor t;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root.impl().get());
  handles.emplace(root.impl().get(), root);
  while (!stack.empty()) {
    auto& frame = stack.back();
    const auto& fn = frame.t.impl()->grad_fn;
    if (fn && frame.next < fn->inputs.size()) {
      const Tensor& in = fn->inputs[frame.next++];
      if (in.requires_grad() && visited.insert(in.impl().get()).second) {
        handles.emplace(in.impl().get(), in);
        stack.push_back({in, 0});
      }
      continue;
    }
    order.push_back(frame.t.impl().get());
    stack.pop_back();
  }
  return order;
}

Tensor add_plain(const Tensor& a, const Tensor& b) {
  return dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::from_buffer<T>(a.shape(), std::move(out));
  });
}

}  // namespace

std::vector<std::shared_ptr<detail::Node>> topological_order(const Tensor& root) {
  std::unordered_map<const detail::TensorImpl*, Tensor> handles;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto* impl : tensor_order(root, handles)) {
    if (impl->grad_fn) nodes.push_back(impl->grad_fn);
  }
  return nodes;
}

void backward(const Tensor& loss, BackwardOptions options) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward: loss must be a scalar, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw StateError("backward: loss is not connected to any tensor requiring grad");
  }
  NoGradGuard no_grad;
  std::unordered_map<const detail::TensorImpl*, Tensor> handles;
  const auto order = tensor_order(loss, handles);

  std::unordered_map<const detail::TensorImpl*, Tensor> grads;
  grads[loss.impl().get()] = Tensor::ones(loss.shape(), loss.dtype());

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const detail::TensorImpl* impl = *it;
    if (!impl->grad_fn) continue;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    const Tensor g = found->second;
    grads.erase(found);
    const auto& node = *impl->grad_fn;
    auto input_grads = node.backward(g);
    for (std::size_t i = 0; i < node.inputs.size() && i < input_grads.size(); ++i) {
      const Tensor& in = node.inputs[i];
      if (!in.requires_grad() || !input_grads[i].defined()) continue;
      if (input_grads[i].shape() != in.shape()) {
        throw DimensionError("backward of " + node.name + ": gradient shape " +
                             shape_str(input_grads[i].shape()) + " != input shape " +
                             shape_str(in.shape()));
      }
      auto& slot = grads[in.impl().get()];
      slot = slot.defined() ? add_plain(slot, input_grads[i]) : input_grads[i];
    }
  }

  for (auto& [impl, g] : grads) {
    if (impl->grad_fn) continue;
    Tensor leaf = handles.at(impl);
    if (options.accumulate && leaf.has_grad()) {
      leaf.impl()->grad = add_plain(leaf.grad(), g).impl()->data;
    } else {
      leaf.impl()->grad = std::make_shared<detail::Buffer>(*g.impl()->data);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IngestError("truncated tensor stream");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.data<T>();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(T)));
  });
}

Tensor read_tensor(std::istream& in) {
  const auto tag = get<std::uint8_t>(in);
  if (tag > 1) throw IngestError("unknown tensor dtype tag " + std::to_string(tag));
  const auto rank = get<std::uint32_t>(in);
  if (rank > 16) throw IngestError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(in);
  const DType dtype = static_cast<DType>(tag);
  return dispatch(dtype, [&]<class T>() {
    std::vector<T> v(shape_numel(shape));
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!in) throw IngestError("truncated tensor payload");
    return Tensor::from_buffer<T>(shape, std::move(v));
  });
}

}  // namespace bicap
