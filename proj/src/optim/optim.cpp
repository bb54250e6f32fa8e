#include "bicap/optim.hpp"

#include <cmath>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>

#include "bicap/errors.hpp"
#include "bicap/model.hpp"

namespace bicap {

namespace {

void copy_values(const Tensor& src, Tensor dst) {
  dispatch(dst.dtype(), [&]<class T>() {
    auto s = src.data<T>();
    auto d = dst.mutable_data<T>();
    std::copy(s.begin(), s.end(), d.begin());
  });
}

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw MismatchError("optimizer state: truncated stream");
  return v;
}

void write_f64(std::ostream& out, double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

double read_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw MismatchError("optimizer state: truncated stream");
  return v;
}

void load_into(std::istream& in, std::vector<Tensor>& dst, const char* what) {
  const std::uint64_t n = read_u64(in);
  if (n != dst.size()) {
    throw MismatchError(std::string(what) + ": state has " + std::to_string(n) + " tensors, optimizer has " +
                        std::to_string(dst.size()));
  }
  for (auto& t : dst) {
    Tensor loaded = read_tensor(in);
    if (loaded.shape() != t.shape() || loaded.dtype() != t.dtype()) {
      throw MismatchError(std::string(what) + ": tensor " + shape_str(loaded.shape()) + " does not match " +
                          shape_str(t.shape()));
    }
    copy_values(loaded, t);
  }
}

}  // namespace

std::vector<ParamGroup> build_param_groups(const nn::ParamList& params, double backbone_lr, double head_lr,
                                           double weight_decay) {
  std::vector<ParamGroup> groups(4);
  groups[0] = {"backbone.decay", {}, backbone_lr, weight_decay};
  groups[1] = {"backbone.no_decay", {}, backbone_lr, 0.0};
  groups[2] = {"head.decay", {}, head_lr, weight_decay};
  groups[3] = {"head.no_decay", {}, head_lr, 0.0};
  std::map<const void*, std::string> seen;
  for (const auto& p : params) {
    auto [it, fresh] = seen.emplace(p.tensor.storage_id(), p.name);
    if (!fresh) throw StateError("param groups: '" + p.name + "' shares storage with '" + it->second + "'");
    const std::size_t g = (is_backbone_param(p.name) ? 0 : 2) + (p.decay ? 0 : 1);
    groups[g].params.push_back(p);
  }
  return groups;
}

void ScheduleConfig::validate() const {
  if (!(warmup_iters > 0 && warmup_iters < total_iters)) {
    throw StateError("schedule: need 0 < warmup (" + std::to_string(warmup_iters) + ") < total (" +
                     std::to_string(total_iters) + ")");
  }
}

double lr_at(const ScheduleConfig& s, double max_lr, std::size_t iter) {
  s.validate();
  if (iter > s.total_iters) {
    throw StateError("schedule: iteration " + std::to_string(iter) + " beyond total " + std::to_string(s.total_iters));
  }
  if (iter < s.warmup_iters) return max_lr * static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
  const double progress =
      static_cast<double>(iter - s.warmup_iters) / static_cast<double>(s.total_iters - s.warmup_iters);
  return max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<ParamGroup> groups, double momentum) : groups_(std::move(groups)), momentum_(momentum) {
  if (!(momentum >= 0 && momentum < 1)) throw StateError("sgd: momentum must be in [0, 1)");
  for (const auto& g : groups_) {
    if (g.weight_decay < 0) throw StateError("sgd: negative weight decay in group " + g.name);
    for (const auto& p : g.params) buffers_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  }
}

void Sgd::step(std::span<const double> lrs) {
  if (lrs.size() != groups_.size()) {
    throw StateError("sgd: " + std::to_string(lrs.size()) + " rates for " + std::to_string(groups_.size()) + " groups");
  }
  std::size_t k = 0;
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    const double lr = lrs[g], wd = groups_[g].weight_decay, mu = momentum_;
    for (const auto& ref : groups_[g].params) {
      if (!ref.tensor.has_grad()) throw StateError("sgd: parameter '" + ref.name + "' has no gradient");
      Tensor param = ref.tensor;
      const Tensor grad = param.grad();
      Tensor buf = buffers_[k++];
      dispatch(param.dtype(), [&]<class T>() {
        auto p = param.mutable_data<T>();
        auto b = buf.mutable_data<T>();
        auto gr = grad.data<T>();
        for (std::size_t i = 0; i < p.size(); ++i) {
          b[i] = static_cast<T>(mu * b[i] + (gr[i] + wd * p[i]));
          p[i] = static_cast<T>(p[i] - lr * b[i]);
        }
      });
    }
  }
}

void Sgd::clear_grads() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.tensor.clear_grad();
}

void Sgd::save_state(std::ostream& out) const {
  write_f64(out, momentum_);
  write_u64(out, buffers_.size());
  for (const auto& b : buffers_) write_tensor(out, b);
}

void Sgd::load_state(std::istream& in) {
  const double mu = read_f64(in);
  if (mu != momentum_) throw MismatchError("sgd: saved momentum differs from configured momentum");
  load_into(in, buffers_, "sgd");
}

// ---------------------------------------------------------------------------

LookAhead::LookAhead(Sgd inner, double alpha, std::size_t k) : inner_(std::move(inner)), alpha_(alpha), k_(k) {
  if (!(alpha >= 0 && alpha <= 1)) throw StateError("lookahead: alpha must be in [0, 1]");
  if (k == 0) throw StateError("lookahead: sync period must be positive");
  for (const auto& g : inner_.groups())
    for (const auto& p : g.params) slow_.push_back(p.tensor.clone());
}

void LookAhead::step(std::span<const double> lrs) {
  inner_.step(lrs);
  if (++counter_ % k_ != 0) return;
  std::size_t i = 0;
  for (const auto& g : inner_.groups()) {
    for (const auto& ref : g.params) {
      Tensor fast = ref.tensor;
      Tensor slow = slow_[i++];
      dispatch(fast.dtype(), [&]<class T>() {
        auto f = fast.mutable_data<T>();
        auto s = slow.mutable_data<T>();
        for (std::size_t j = 0; j < f.size(); ++j) {
          s[j] = static_cast<T>((1.0 - alpha_) * s[j] + alpha_ * f[j]);
          f[j] = s[j];
        }
      });
    }
  }
}

void LookAhead::save_state(std::ostream& out) const {
  inner_.save_state(out);
  write_f64(out, alpha_);
  write_u64(out, k_);
  write_u64(out, counter_);
  write_u64(out, slow_.size());
  for (const auto& s : slow_) write_tensor(out, s);
}

void LookAhead::load_state(std::istream& in) {
  inner_.load_state(in);
  const double alpha = read_f64(in);
  const std::uint64_t k = read_u64(in);
  if (alpha != alpha_ || k != k_) throw MismatchError("lookahead: saved alpha/k differ from configuration");
  counter_ = read_u64(in);
  load_into(in, slow_, "lookahead");
}

}  // namespace bicap
