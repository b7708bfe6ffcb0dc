#pragma once

#include <cmath>

#include "fbdiff/tensor.hpp"

namespace fbdiff {

/// Learning-rate schedule: linear warm-up from 0 to base_lr over
/// warmup_steps, then cosine decay to 0 at total_steps.
inline double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
  require(step >= 0 && step <= total_steps, ErrorCode::InvalidArgument,
          "lr_at: step out of range");
  require(warmup_steps < total_steps, ErrorCode::InvalidArgument,
          "lr_at: warmup must be shorter than the run");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// Single-parameter AdamW update with bias correction and decoupled weight
/// decay. `k` is the step counter value after incrementing (1-based).
template <typename T>
void adamw_update(T* param, const T* grad, T* m, T* v, int64_t count, int64_t k, double lr,
                  double beta1, double beta2, double eps, double weight_decay) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(k));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(k));
  for (int64_t i = 0; i < count; ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
    const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    const double update = mhat / (std::sqrt(vhat) + eps) + weight_decay * static_cast<double>(param[i]);
    param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * update);
  }
}

/// Named parameter table; registration order is the canonical ordering used
/// for optimizer state and checkpoint layout.
template <typename T>
struct ParamList {
  std::vector<std::string> names;
  std::vector<Tensor<T>*> tensors;

  void add(const std::string& name, Tensor<T>* t) {
    names.push_back(name);
    tensors.push_back(t);
  }
  void add_all(const ParamList<T>& other, const std::string& prefix) {
    for (size_t i = 0; i < other.names.size(); ++i) {
      names.push_back(prefix + other.names[i]);
      tensors.push_back(other.tensors[i]);
    }
  }
  size_t size() const { return tensors.size(); }
};

/// Decoupled-weight-decay Adam over a fixed parameter list.
template <typename T>
class AdamW {
 public:
  AdamW(size_t n_params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), slots_(n_params) {}

  /// grads[i] pairs with params.tensors[i]; both follow registration order.
  void step(ParamList<T>& params, const std::vector<std::vector<T>>& grads, double lr) {
    require(params.size() == slots_.size() && grads.size() == slots_.size(),
            ErrorCode::ShapeMismatch, "adamw: parameter/gradient count mismatch");
    ++step_count_;
    for (size_t i = 0; i < slots_.size(); ++i) {
      Tensor<T>& p = *params.tensors[i];
      require(static_cast<int64_t>(grads[i].size()) == p.numel(), ErrorCode::ShapeMismatch,
              "adamw: gradient size mismatch for " + params.names[i]);
      auto& slot = slots_[i];
      if (slot.m.empty()) {
        slot.m.assign(p.numel(), T(0));
        slot.v.assign(p.numel(), T(0));
      }
      adamw_update(p.ptr(), grads[i].data(), slot.m.data(), slot.v.data(), p.numel(), step_count_,
                   lr, beta1_, beta2_, eps_, weight_decay_);
    }
  }

  int64_t step_count() const { return step_count_; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<Slot> slots_;
  int64_t step_count_ = 0;
};

}  // namespace fbdiff
