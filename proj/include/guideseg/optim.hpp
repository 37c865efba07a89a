#pragma once

#include <cmath>
#include <vector>

namespace guideseg {

/// Adam with a fixed learning rate over a set of parameter buffers.
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::vector<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  /// grads[i] matches params[i]; `scale` multiplies every gradient first.
  void step(const std::vector<std::vector<T>>& grads, double scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = static_cast<double>(grads[i][k]) * scale;
        m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
        v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
        const double update = lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
        p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
      }
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<std::vector<T>*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace guideseg
