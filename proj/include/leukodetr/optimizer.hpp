#pragma once

#include "leukodetr/nn.hpp"

namespace leukodetr {

struct OptimConfig {
  double lr_backbone = 2e-5;
  double lr_transformer = 2e-4;
  double lr_fpn = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;     // global gradient norm; <= 0 disables
  int64_t step_size = 40;     // epochs between learning-rate decays
  double step_gamma = 0.1;
};

// Decoupled-weight-decay Adam with per-group learning rates selected by each
// parameter's group tag.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, const OptimConfig& cfg);

  void zero_grad();
  // Global-norm clip; returns the pre-clip norm.
  double clip_gradients();
  void step();

  void set_lr_scale(double s) { lr_scale_ = s; }
  double lr_scale() const { return lr_scale_; }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  struct Slot {
    NamedParam<T> param;
    Tensor<T> m, v;
    double lr;
  };
  std::vector<Slot>& slots() { return slots_; }

 private:
  std::vector<Slot> slots_;
  OptimConfig cfg_;
  int64_t t_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace leukodetr
