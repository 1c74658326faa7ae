#pragma once

#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

namespace agsm {

// Decoupled-weight-decay Adam over a flat parameter vector.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  Eigen::VectorXd m, v;
  long step_count = 0;

  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr_scale = 1.0) {
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(theta.size());
      v = Eigen::VectorXd::Zero(theta.size());
    }
    if (grad.size() != theta.size() || m.size() != theta.size())
      throw std::invalid_argument("optimizer size mismatch");
    ++step_count;
    double step_lr = lr * lr_scale;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad).eval();
    double bc1 = 1.0 - std::pow(beta1, double(step_count));
    double bc2 = 1.0 - std::pow(beta2, double(step_count));
    theta -= step_lr * weight_decay * theta;
    theta -= (step_lr / bc1) *
             (m.array() / ((v.array() / bc2).sqrt() + eps)).matrix();
  }
};

// Cosine-annealed learning-rate multiplier with warm restarts: within a cycle
// of length T_i the factor falls from 1 to ~0 on a half cosine, then resets;
// cycle lengths grow by t_mult.
struct CosineRestarts {
  long t0 = 500;
  long t_mult = 1;

  double factor(long step) const {
    if (t0 <= 0) return 1.0;
    long cycle_len = t0;
    long s = step;
    while (s >= cycle_len) {
      s -= cycle_len;
      cycle_len *= t_mult > 1 ? t_mult : 1;
      if (t_mult <= 1) cycle_len = t0;
    }
    return 0.5 * (1.0 + std::cos(M_PI * double(s) / double(cycle_len)));
  }
};

}  // namespace agsm
