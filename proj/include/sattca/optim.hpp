#pragma once

#include <sattca/segnet.hpp>

#include <cmath>
#include <numbers>
#include <vector>

namespace sattca {

/// Adaptive moment estimation with decoupled weight decay.
struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename S>
class AdamW {
 public:
  AdamW(const SegModel<S>& model, std::vector<std::size_t> which, AdamWConfig cfg = {})
      : which_(std::move(which)), cfg_(cfg) {
    for (std::size_t i : which_) {
      const auto& v = model.parameters()[i].value;
      m_.push_back(nn::Mat<S>::Zero(v.rows(), v.cols()));
      v_.push_back(nn::Mat<S>::Zero(v.rows(), v.cols()));
    }
  }

  /// One update from the accumulated gradients, scaled by `grad_scale`
  /// (e.g. 1 / batch size).
  void step(SegModel<S>& model, double lr, double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < which_.size(); ++k) {
      auto& p = model.parameters()[which_[k]];
      const auto g = (p.grad.array() * S(grad_scale)).eval();
      m_[k].array() = S(cfg_.beta1) * m_[k].array() + S(1 - cfg_.beta1) * g;
      v_[k].array() = S(cfg_.beta2) * v_[k].array() + S(1 - cfg_.beta2) * g.square();
      if (cfg_.weight_decay != 0.0) p.value *= S(1.0 - lr * cfg_.weight_decay);
      p.value.array() -= S(lr) * (m_[k].array() / S(bc1)) /
                         ((v_[k].array() / S(bc2)).sqrt() + S(cfg_.eps));
    }
  }

  int steps() const { return t_; }

 private:
  std::vector<std::size_t> which_;
  AdamWConfig cfg_;
  std::vector<nn::Mat<S>> m_, v_;
  int t_ = 0;
};

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t)) / 2 for t in [0, 1].
inline double cosine_lr(double t, double lr_max, double lr_min) {
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Per-epoch schedule: the first epoch runs at lr_max, the last at lr_min.
inline double cosine_lr_at_epoch(int epoch, int epochs, double lr_max, double lr_min) {
  if (epochs <= 1) return lr_max;
  return cosine_lr(static_cast<double>(epoch) / (epochs - 1), lr_max, lr_min);
}

}  // namespace sattca
