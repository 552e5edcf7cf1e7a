#pragma once

// AdamW (decoupled weight decay) over a set of Parameters, and the
// linear-warmup learning-rate schedules used by the trainer.

#include <cmath>
#include <cstddef>
#include <vector>

#include "domaininv/qa_model.hpp"

namespace domaininv {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value().rows, p->value().cols);
      v_.emplace_back(p->value().rows, p->value().cols);
    }
  }

  // Applies one update with learning rate `lr` using the accumulated gradients,
  // then clears them. Parameters without a gradient still receive weight decay.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      Matrix& w = p.value();
      const bool has = p.has_grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = has ? p.grad().data[j] : 0.0;
        double& m = m_[i].data[j];
        double& v = v_[i].data[j];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        w.data[j] -= lr * cfg_.weight_decay * w.data[j];
        w.data[j] -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  std::size_t steps_taken() const { return t_; }

private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup from 0 over `warmup_fraction` of the steps, then either
// linear decay to 0 at `total_steps` or constant.
struct LinearSchedule {
  double base_lr = 1e-3;
  std::size_t total_steps = 1;
  double warmup_fraction = 0.1;
  bool decay = true;

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  }

  double operator()(std::size_t step) const {
    const std::size_t warm = warmup_steps();
    if (step < warm) return base_lr * static_cast<double>(step) / static_cast<double>(warm);
    if (!decay) return base_lr;
    if (step >= total_steps) return 0.0;
    const double remaining = static_cast<double>(total_steps - step);
    const double span = static_cast<double>(total_steps - warm);
    return span <= 0.0 ? base_lr : base_lr * remaining / span;
  }
};

}  // namespace domaininv
