#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "agsm/agsm.hpp"
#include "agsm/data.hpp"
#include "agsm/denoiser.hpp"

namespace agsm {

struct SoftrepaConfig {
  double tau = 1.0;  // temperature on the squared-error logit
  // The printed contrastive form wraps the similarity in a second exp; the
  // log-space form below is the default, the literal form is kept switchable.
  bool literal_double_exp = false;
};

inline void validate(const SoftrepaConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw std::invalid_argument("tau must be positive");
}

// Log-space similarity of a (noised image, condition) pair under the shared
// token matrix s: minus the temperature-scaled denoising error.
inline double softrepa_logit(const DenoiserParams& params, const Eigen::MatrixXd& s,
                             const NoiseSchedule& sched, const Eigen::VectorXd& x_t, int t,
                             int c, const Eigen::VectorXd& eps, double tau_t) {
  return -(predict(params, sched, x_t, t, c, &s) - eps).squaredNorm() / tau_t;
}

struct SoftrepaLossResult {
  double loss = 0.0;
  double pos_denoise = 0.0;
  double neg_denoise = 0.0;
  double mean_entropy = 0.0;
  Eigen::MatrixXd grad;  // d loss / d s
  Eigen::MatrixXd logits, probs;
};

// Row-wise cross-entropy over in-group conditions with the matched condition
// as the correct class. Every prediction uses the single live token matrix, so
// the gradient has an ascent component on off-diagonal denoising errors.
inline SoftrepaLossResult softrepa_group_loss(const DenoiserParams& params,
                                              const Eigen::MatrixXd& s,
                                              const NoiseSchedule& sched,
                                              const GroupBatch& batch,
                                              const SoftrepaConfig& cfg = {}) {
  validate(cfg);
  const int G = batch.G;
  const Dims& dm = params.dims;
  const double time01 = double(batch.t) / double(sched.T);
  const int n = G * G;

  Eigen::MatrixXd in(dm.input_dim(), n);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j)
      in.col(i * G + j) = assemble_input(params, batch.x_t[i], time01, batch.cond[j], &s);
  ForwardCache cache;
  Eigen::MatrixXd pred = forward_batch(params, in, &cache);

  SoftrepaLossResult out;
  out.logits.resize(G, G);
  Eigen::MatrixXd err2(G, G);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      err2(i, j) = (pred.col(i * G + j) - batch.eps).squaredNorm();
      out.logits(i, j) = -err2(i, j) / cfg.tau;
      if (i == j)
        out.pos_denoise += err2(i, j) / double(G);
      else if (G > 1)
        out.neg_denoise += err2(i, j) / double(n - G);
    }

  // Optionally exponentiate the logit before the softmax (the literal printed
  // form); dlogit carries the chain factor for the backward pass.
  Eigen::MatrixXd eff = out.logits, chain = Eigen::MatrixXd::Ones(G, G);
  if (cfg.literal_double_exp) {
    eff = out.logits.array().exp().matrix();
    chain = eff;
  }

  out.probs.resize(G, G);
  Eigen::MatrixXd upstream(dm.d, n);
  for (int i = 0; i < G; ++i) {
    Eigen::VectorXd w = pl_weights(eff.row(i).transpose());
    out.probs.row(i) = w.transpose();
    out.mean_entropy += pl_entropy(w) / double(G);
    double lse = std::log(w[i]);  // log softmax at the diagonal entry
    out.loss += -lse / double(G);
    for (int j = 0; j < G; ++j) {
      double dl_deff = (w[j] - (i == j ? 1.0 : 0.0)) / double(G);
      double dl_dlogit = dl_deff * chain(i, j);
      upstream.col(i * G + j) =
          dl_dlogit * (-2.0 / cfg.tau) * (pred.col(i * G + j) - batch.eps);
    }
  }
  if (!std::isfinite(out.loss)) throw std::runtime_error("non-finite contrastive loss");

  Eigen::MatrixXd gin = backward_batch(params, cache, upstream);
  Eigen::RowVectorXd gsum = Eigen::RowVectorXd::Zero(dm.d_s);
  for (int col = 0; col < n; ++col)
    gsum += gin.col(col).segment(dm.token_offset(), dm.d_s).transpose() / double(s.rows());
  out.grad = gsum.replicate(int(s.rows()), 1);
  return out;
}

// Positive-only ablation: optimize psi+ on diagonal pairs alone. Guidance
// deltas still use the whole row of EMA predictions (mismatched conditions
// guide but are never optimized), and psi- receives exactly zero gradient.
inline GroupLossResult positive_only_loss(const DenoiserParams& params,
                                          const SoftTokenBank& bank,
                                          const NoiseSchedule& sched, const GroupBatch& batch,
                                          const GuidanceConfig& cfg) {
  validate(cfg);
  const int G = batch.G;
  const Dims& dm = params.dims;
  const double time01 = double(batch.t) / double(sched.T);

  Eigen::MatrixXd in_live(dm.input_dim(), G), in_ema(dm.input_dim(), G * G);
  for (int i = 0; i < G; ++i) {
    in_live.col(i) =
        assemble_input(params, batch.x_t[i], time01, batch.cond[i], &bank.psi_pos);
    for (int j = 0; j < G; ++j)
      in_ema.col(i * G + j) = assemble_input(params, batch.x_t[i], time01, batch.cond[j],
                                             i == j ? &bank.ema_pos : &bank.ema_neg);
  }
  ForwardCache cache;
  Eigen::MatrixXd pred = forward_batch(params, in_live, &cache);
  Eigen::MatrixXd ema_pred = forward_batch(params, in_ema);

  GroupLossResult out;
  PLTable& tab = out.table;
  tab.rewards.resize(G, G);
  tab.weights.resize(G, G);
  tab.ema_pred.assign(G, std::vector<Eigen::VectorXd>(G));
  tab.pred.assign(G, std::vector<Eigen::VectorXd>(1));
  tab.delta.assign(G, std::vector<Eigen::VectorXd>(1));
  tab.target.assign(G, std::vector<Eigen::VectorXd>(1));

  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      tab.ema_pred[i][j] = ema_pred.col(i * G + j);
      tab.rewards(i, j) =
          alignment_reward(sched, tab.ema_pred[i][j], batch.eps, batch.t);
    }
  if (!tab.rewards.allFinite())
    detail::check_finite_loss(std::numeric_limits<double>::quiet_NaN(), batch.t, tab.rewards);

  Eigen::MatrixXd upstream(dm.d, G);
  for (int i = 0; i < G; ++i) {
    tab.weights.row(i) =
        pl_weights(tab.rewards.row(i).transpose() / cfg.pl_temperature).transpose();
    out.mean_pl_entropy += pl_entropy(tab.weights.row(i).transpose()) / double(G);
    tab.pred[i][0] = pred.col(i);
    tab.delta[i][0] = guidance_delta(tab.ema_pred[i], tab.weights.row(i).transpose(), i);
    out.mean_delta_norm += tab.delta[i][0].norm() / double(G);
    tab.target[i][0] =
        target_noise(batch.eps, tab.delta[i][0], true, cfg, sched.A_tilde[batch.t]);
    Eigen::VectorXd resid = tab.pred[i][0] - tab.target[i][0];
    out.loss += resid.squaredNorm() / double(G);
    upstream.col(i) = (2.0 / double(G)) * resid;
    out.pos_denoise += (tab.pred[i][0] - batch.eps).squaredNorm() / double(G);
    // Off-diagonal diagnostic uses the frozen EMA-token predictions (there is
    // no live negative prediction in this variant).
    for (int j = 0; j < G; ++j)
      if (i != j && G > 1)
        out.neg_denoise +=
            (tab.ema_pred[i][j] - batch.eps).squaredNorm() / double(G * G - G);
  }
  detail::check_finite_loss(out.loss, batch.t, tab.rewards);

  Eigen::MatrixXd gin = backward_batch(params, cache, upstream);
  detail::TokenGradAccum acc(dm);
  for (int i = 0; i < G; ++i) acc.add(gin, i, true);
  out.grad_pos = acc.pos_grad();
  out.grad_neg = Eigen::MatrixXd::Zero(dm.m, dm.d_s);
  return out;
}

}  // namespace agsm
