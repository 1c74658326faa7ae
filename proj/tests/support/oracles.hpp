#pragma once

// Independent re-implementations used as test oracles. Everything here is
// deliberately written as plain scalar loops over std:: math so that it shares
// no arithmetic with the library beyond the predictor itself.

#include <cmath>
#include <vector>

#include "agsm/data.hpp"
#include "agsm/denoiser.hpp"
#include "agsm/flow.hpp"
#include "agsm/schedule.hpp"

namespace oracle {

// Full group-grid objective for G=2, d=1: rewards, two-candidate softmax,
// deltas, tilted targets, mean squared residual.
inline double agsm_loss_g2_d1(const agsm::DenoiserParams& params,
                              const agsm::SoftTokenBank& bank,
                              const agsm::NoiseSchedule& sched, const agsm::GroupBatch& batch,
                              double gamma_pos, double gamma_neg) {
  double pred[2][2], ema[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const Eigen::MatrixXd& live = i == j ? bank.psi_pos : bank.psi_neg;
      const Eigen::MatrixXd& shadow = i == j ? bank.ema_pos : bank.ema_neg;
      pred[i][j] =
          agsm::predict(params, sched, batch.x_t[i], batch.t, batch.cond[j], &live)[0];
      ema[i][j] =
          agsm::predict(params, sched, batch.x_t[i], batch.t, batch.cond[j], &shadow)[0];
    }
  double eps = batch.eps[0];
  double A = sched.A[batch.t], At = sched.A_tilde[batch.t];
  double loss = 0.0;
  for (int i = 0; i < 2; ++i) {
    double r0 = -0.5 * A * (ema[i][0] - eps) * (ema[i][0] - eps);
    double r1 = -0.5 * A * (ema[i][1] - eps) * (ema[i][1] - eps);
    double w0 = std::exp(r0) / (std::exp(r0) + std::exp(r1));
    double w1 = 1.0 - w0;
    double avg = w0 * ema[i][0] + w1 * ema[i][1];
    for (int j = 0; j < 2; ++j) {
      double delta = ema[i][j] - avg;
      double g = i == j ? gamma_pos : -gamma_neg;
      double tgt = eps + g * At * delta;
      loss += (pred[i][j] - tgt) * (pred[i][j] - tgt);
    }
  }
  return loss / 4.0;
}

// Flow analog: EMA velocity predictions at t+delta, local-transition rewards,
// velocity targets u_i = eps - x0_i.
inline double flow_loss_g2_d1(const agsm::DenoiserParams& params,
                              const agsm::SoftTokenBank& bank, const agsm::FlowConfig& fcfg,
                              const agsm::FlowGroupBatch& batch, double gamma_pos,
                              double gamma_neg) {
  double pred[2][2], vema[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const Eigen::MatrixXd& live = i == j ? bank.psi_pos : bank.psi_neg;
      const Eigen::MatrixXd& shadow = i == j ? bank.ema_pos : bank.ema_neg;
      pred[i][j] =
          agsm::predict_time01(params, batch.x_t[i], batch.t, batch.cond[j], &live)[0];
      vema[i][j] = agsm::predict_time01(params, batch.x_t_plus[i],
                                        batch.t + fcfg.delta_step, batch.cond[j], &shadow)[0];
    }
  double loss = 0.0;
  for (int i = 0; i < 2; ++i) {
    double xt = batch.x_t[i][0], xtp = batch.x_t_plus[i][0];
    double r[2];
    for (int j = 0; j < 2; ++j) {
      double mu = xtp - fcfg.delta_step * vema[i][j];
      r[j] = -0.5 * fcfg.lambda / fcfg.sigma2 * (xt - mu) * (xt - mu);
    }
    double w0 = std::exp(r[0]) / (std::exp(r[0]) + std::exp(r[1]));
    double w1 = 1.0 - w0;
    double avg = w0 * vema[i][0] + w1 * vema[i][1];
    double u = batch.eps[0] - batch.x0[i][0];
    for (int j = 0; j < 2; ++j) {
      double delta = vema[i][j] - avg;
      double g = i == j ? gamma_pos : -gamma_neg;
      double tgt = u + g * fcfg.B * delta;
      loss += (pred[i][j] - tgt) * (pred[i][j] - tgt);
    }
  }
  return loss / 4.0;
}

// Row-wise contrastive cross-entropy for G=2, d=1 with the shared token
// matrix; naive exp/log arithmetic.
inline double softrepa_loss_g2_d1(const agsm::DenoiserParams& params, const Eigen::MatrixXd& s,
                                  const agsm::NoiseSchedule& sched,
                                  const agsm::GroupBatch& batch, double tau) {
  double logit[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double p =
          agsm::predict(params, sched, batch.x_t[i], batch.t, batch.cond[j], &s)[0];
      double e = batch.eps[0];
      logit[i][j] = -(p - e) * (p - e) / tau;
    }
  double loss = 0.0;
  for (int i = 0; i < 2; ++i) {
    double denom = std::exp(logit[i][0]) + std::exp(logit[i][1]);
    loss += -std::log(std::exp(logit[i][i]) / denom);
  }
  return loss / 2.0;
}

}  // namespace oracle
