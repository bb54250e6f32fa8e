#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bicap/nn.hpp"

namespace bicap {

struct ParamGroup {
  std::string name;
  nn::ParamList params;
  double base_lr = 0;
  double weight_decay = 0;
};

/// Four groups in fixed order: backbone.decay, backbone.no_decay,
/// head.decay, head.no_decay. Everything not under "backbone." is head.
/// Throws StateError if one storage appears under two names.
std::vector<ParamGroup> build_param_groups(const nn::ParamList& params, double backbone_lr, double head_lr,
                                           double weight_decay);

struct ScheduleConfig {
  std::size_t warmup_iters = 100;
  std::size_t total_iters = 5000;

  // Throws StateError unless 0 < warmup < total.
  void validate() const;
};

// Linear warmup from 0, then cosine decay to 0 at total_iters.
double lr_at(const ScheduleConfig& schedule, double max_lr, std::size_t iter);

// Classic SGD: buf = momentum*buf + (grad + wd*param); param -= lr*buf.
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<ParamGroup> groups, double momentum);

  // One rate per group. Throws StateError when a parameter has no gradient.
  void step(std::span<const double> lrs);
  void clear_grads();

  const std::vector<ParamGroup>& groups() const { return groups_; }
  double momentum() const { return momentum_; }
  const std::vector<Tensor>& buffers() const { return buffers_; }

  void save_state(std::ostream& out) const;
  // Throws MismatchError when shapes or counts differ.
  void load_state(std::istream& in);

 private:
  std::vector<ParamGroup> groups_;
  std::vector<Tensor> buffers_;  // flattened over groups
  double momentum_ = 0.9;
};

/// Slow/fast weights around an inner SGD. Every k inner steps:
/// slow = (1 - alpha)*slow + alpha*fast; fast = slow. Inner momentum is kept.
class LookAhead {
 public:
  LookAhead() = default;
  LookAhead(Sgd inner, double alpha, std::size_t k);

  void step(std::span<const double> lrs);
  void clear_grads() { inner_.clear_grads(); }

  Sgd& inner() { return inner_; }
  const Sgd& inner() const { return inner_; }
  const std::vector<Tensor>& slow_weights() const { return slow_; }
  std::size_t counter() const { return counter_; }
  double alpha() const { return alpha_; }
  std::size_t sync_period() const { return k_; }

  void save_state(std::ostream& out) const;
  void load_state(std::istream& in);

 private:
  Sgd inner_;
  std::vector<Tensor> slow_;
  double alpha_ = 0.5;
  std::size_t k_ = 5;
  std::size_t counter_ = 0;
};

}  // namespace bicap
