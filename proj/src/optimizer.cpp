#include "leukodetr/optimizer.hpp"

#include <cmath>

namespace leukodetr {

template <class T>
AdamW<T>::AdamW(std::vector<NamedParam<T>> params, const OptimConfig& cfg) : cfg_(cfg) {
  for (auto& p : params) {
    double lr = cfg.lr_transformer;
    if (p.group == "backbone") lr = cfg.lr_backbone;
    if (p.group == "fpn") lr = cfg.lr_fpn;
    slots_.push_back({p, Tensor<T>::zeros(p.var->shape()), Tensor<T>::zeros(p.var->shape()), lr});
  }
}

template <class T>
void AdamW<T>::zero_grad() {
  for (auto& s : slots_) s.param.var->zero_grad();
}

template <class T>
double AdamW<T>::clip_gradients() {
  double total = 0;
  for (auto& s : slots_) {
    const Tensor<T>& g = s.param.var->grad();
    for (int64_t i = 0; i < g.numel(); ++i) total += double(g[i]) * double(g[i]);
  }
  total = std::sqrt(total);
  if (cfg_.clip_norm > 0 && total > cfg_.clip_norm) {
    T scale = T(cfg_.clip_norm / (total + 1e-12));
    for (auto& s : slots_) {
      Tensor<T>& g = s.param.var->grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
    }
  }
  return total;
}

template <class T>
void AdamW<T>::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (auto& s : slots_) {
    Tensor<T>& p = s.param.var->node()->value;
    const Tensor<T>& g = s.param.var->grad();
    double lr = s.lr * lr_scale_;
    for (int64_t i = 0; i < p.numel(); ++i) {
      double gi = g[i];
      double m = cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * gi;
      double v = cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * gi * gi;
      s.m[i] = T(m);
      s.v[i] = T(v);
      double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
      p[i] = T(p[i] - lr * (update + cfg_.weight_decay * p[i]));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace leukodetr
