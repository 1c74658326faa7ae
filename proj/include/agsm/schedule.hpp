#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace agsm {

// Discrete-time noising schedule. All per-step arrays have size T+1 and are
// indexed by t in [1, T]; index 0 is a sentinel (alpha_bar[0] = 1 exactly) so
// formulas involving alpha_bar[t-1] need no special case at t = 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;           // beta[t]
  std::vector<double> alpha;          // 1 - beta[t]
  std::vector<double> alpha_bar;      // prod_{s<=t} alpha[s]; alpha_bar[0] = 1
  std::vector<double> posterior_var;  // (1 - alpha_bar[t-1])/(1 - alpha_bar[t]) * beta[t]
  std::vector<double> lambda;         // per-step reward weight
  std::vector<double> A;              // lambda[t]*beta[t] / (alpha[t]*(1 - alpha_bar[t-1]))
  std::vector<double> A_tilde;        // A[t] * sqrt(1 - alpha_bar[t])
  bool calibrated = false;

  double snr(int t) const { return alpha_bar[t] / (1.0 - alpha_bar[t]); }
};

inline std::vector<double> linear_beta(int T, double beta_start = 1e-4,
                                       double beta_end = 2e-2) {
  std::vector<double> beta(T + 1, 0.0);
  if (T == 1) {
    beta[1] = beta_start;
    return beta;
  }
  for (int t = 1; t <= T; ++t)
    beta[t] = beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
  return beta;
}

// Fills lambda/A/A_tilde. Calibrated mode picks lambda[t] so that
// A_tilde[t] == 1, which gives the closed form A[t] = 1/sqrt(1 - alpha_bar[t])
// -- evaluated directly, never as the 0/0 ratio that appears at t = 1.
inline void apply_reward_weight(NoiseSchedule& s, bool calibrate) {
  s.lambda.assign(s.T + 1, 0.0);
  s.A.assign(s.T + 1, 0.0);
  s.A_tilde.assign(s.T + 1, 0.0);
  for (int t = 1; t <= s.T; ++t) {
    double one_minus_ab = 1.0 - s.alpha_bar[t];
    if (calibrate) {
      double one_minus_ab_prev = 1.0 - s.alpha_bar[t - 1];
      s.lambda[t] = s.alpha[t] * one_minus_ab_prev / (s.beta[t] * std::sqrt(one_minus_ab));
      s.A[t] = 1.0 / std::sqrt(one_minus_ab);
      s.A_tilde[t] = 1.0;
    } else {
      s.lambda[t] = 1.0;
      double denom = s.alpha[t] * (1.0 - s.alpha_bar[t - 1]);
      s.A[t] = denom > 0.0 ? s.beta[t] / denom
                           : std::numeric_limits<double>::infinity();
      s.A_tilde[t] = s.A[t] * std::sqrt(one_minus_ab);
    }
  }
  s.calibrated = calibrate;
}

inline NoiseSchedule make_schedule(std::vector<double> beta, bool calibrate = true) {
  NoiseSchedule s;
  s.T = static_cast<int>(beta.size()) - 1;
  if (s.T < 1) throw std::invalid_argument("schedule needs at least one step");
  for (int t = 1; t <= s.T; ++t)
    if (!(beta[t] > 0.0 && beta[t] < 1.0))
      throw std::invalid_argument("beta[t] must lie in (0, 1)");
  s.beta = std::move(beta);
  s.alpha.assign(s.T + 1, 1.0);
  s.alpha_bar.assign(s.T + 1, 1.0);
  for (int t = 1; t <= s.T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  s.posterior_var.assign(s.T + 1, 0.0);
  for (int t = 1; t <= s.T; ++t)
    s.posterior_var[t] =
        (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  apply_reward_weight(s, calibrate);
  return s;
}

inline NoiseSchedule build_schedule(int T = 1000, double beta_start = 1e-4,
                                    double beta_end = 2e-2, bool calibrate = true) {
  return make_schedule(linear_beta(T, beta_start, beta_end), calibrate);
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline Eigen::VectorXd forward_noise(const NoiseSchedule& s, int t,
                                     const Eigen::VectorXd& x0,
                                     const Eigen::VectorXd& eps) {
  double ab = s.alpha_bar[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

}  // namespace agsm
