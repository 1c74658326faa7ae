#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "agsm/data.hpp"
#include "agsm/denoiser.hpp"
#include "agsm/schedule.hpp"

namespace agsm {

struct GuidanceConfig {
  double gamma_pos = 1.0;
  double gamma_neg = 1.0;
  double pl_temperature = 1.0;  // softmax over rewards / temperature
};

inline void validate(const GuidanceConfig& cfg) {
  if (!(std::isfinite(cfg.gamma_pos) && cfg.gamma_pos >= 0.0) ||
      !(std::isfinite(cfg.gamma_neg) && cfg.gamma_neg >= 0.0) ||
      !(cfg.pl_temperature > 0.0))
    throw std::invalid_argument("guidance scales must be finite and non-negative");
}

// Implicit alignment reward: negative scaled denoising error of the EMA-token
// prediction against the shared noise draw.
inline double alignment_reward(double A_t, const Eigen::VectorXd& ema_pred,
                               const Eigen::VectorXd& eps) {
  return -0.5 * A_t * (ema_pred - eps).squaredNorm();
}

inline double alignment_reward(const NoiseSchedule& sched, const Eigen::VectorXd& ema_pred,
                               const Eigen::VectorXd& eps, int t) {
  return alignment_reward(sched.A[t], ema_pred, eps);
}

// Softmax with max-subtraction; candidate j gets exp(r_j)/sum_k exp(r_k).
inline Eigen::VectorXd pl_weights(const Eigen::VectorXd& rewards) {
  if (rewards.size() < 1) throw std::invalid_argument("empty reward vector");
  if (!rewards.allFinite()) throw std::invalid_argument("non-finite reward");
  Eigen::ArrayXd shifted = rewards.array() - rewards.maxCoeff();
  Eigen::ArrayXd e = shifted.exp();
  return (e / e.sum()).matrix();
}

inline double pl_entropy(const Eigen::VectorXd& weights) {
  double h = 0.0;
  for (int i = 0; i < weights.size(); ++i)
    if (weights[i] > 0.0) h -= weights[i] * std::log(weights[i]);
  return h;
}

// delta_j = ema_preds[j] - sum_k weights[k] * ema_preds[k]
inline Eigen::VectorXd guidance_delta(const std::vector<Eigen::VectorXd>& ema_preds,
                                      const Eigen::VectorXd& weights, int j) {
  if (int(ema_preds.size()) != weights.size())
    throw std::invalid_argument("weight/prediction count mismatch");
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(ema_preds[0].size());
  for (int k = 0; k < weights.size(); ++k) avg += weights[k] * ema_preds[k];
  return ema_preds[j] - avg;
}

// Tilted regression target. Built from EMA predictions and fixed noise only,
// so it is a constant with respect to the live tokens.
inline Eigen::VectorXd target_noise(const Eigen::VectorXd& eps, const Eigen::VectorXd& delta,
                                    bool is_positive, const GuidanceConfig& cfg,
                                    double A_tilde_t) {
  double g = is_positive ? cfg.gamma_pos : -cfg.gamma_neg;
  return eps + g * A_tilde_t * delta;
}

struct StabilityCheck {
  double lhs = 0.0;  // ||delta_j||
  double rhs = 0.0;  // max_k ||ema_preds[j] - ema_preds[k]||
  bool holds = false;
};

// The guidance delta is a convex-combination residual, so its norm can never
// exceed the worst pairwise prediction gap in the row.
inline StabilityCheck stability_bound_check(const std::vector<Eigen::VectorXd>& ema_preds,
                                            const Eigen::VectorXd& weights, int j) {
  StabilityCheck out;
  out.lhs = guidance_delta(ema_preds, weights, j).norm();
  for (const auto& p : ema_preds)
    out.rhs = std::max(out.rhs, (ema_preds[j] - p).norm());
  out.holds = out.lhs <= out.rhs + 1e-12;
  return out;
}

// Row-wise PL bookkeeping for one group grid. For the full grid the matrices
// are G x G; the Bradley-Terry variant stores G x 2 (positive candidate first)
// plus the sampled negative index per row.
struct PLTable {
  Eigen::MatrixXd rewards, weights;
  std::vector<std::vector<Eigen::VectorXd>> pred, ema_pred, delta, target;
  std::vector<int> bt_negative;  // empty for the full-grid loss
};

struct GroupLossResult {
  double loss = 0.0;              // optimization objective
  double pos_denoise = 0.0;       // mean ||pred - eps||^2 over positive pairs
  double neg_denoise = 0.0;       // mean ||pred - eps||^2 over negative pairs
  double mean_delta_norm = 0.0;
  double mean_pl_entropy = 0.0;
  Eigen::MatrixXd grad_pos, grad_neg;  // d loss / d psi+-
  PLTable table;
};

namespace detail {

inline void check_finite_loss(double loss, double t, const Eigen::MatrixXd& rewards) {
  if (std::isfinite(loss)) return;
  std::ostringstream msg;
  msg << "non-finite group loss at t=" << t
      << " (reward spread " << rewards.minCoeff() << " .. " << rewards.maxCoeff() << ")";
  throw std::runtime_error(msg.str());
}

// Accumulate the token-summary segment of assembled-input gradients into a
// per-polarity token gradient (every token row shares the same cotangent).
struct TokenGradAccum {
  Eigen::RowVectorXd pos, neg;
  int m, d_s, offset;
  TokenGradAccum(const Dims& dm)
      : pos(Eigen::RowVectorXd::Zero(dm.d_s)),
        neg(Eigen::RowVectorXd::Zero(dm.d_s)),
        m(dm.m), d_s(dm.d_s), offset(dm.token_offset()) {}
  void add(const Eigen::MatrixXd& input_grads, int col, bool is_positive) {
    Eigen::RowVectorXd seg =
        input_grads.col(col).segment(offset, d_s).transpose() / double(m);
    (is_positive ? pos : neg) += seg;
  }
  Eigen::MatrixXd pos_grad() const { return pos.replicate(m, 1); }
  Eigen::MatrixXd neg_grad() const { return neg.replicate(m, 1); }
};

}  // namespace detail

// Grid math on explicit prediction tables (row i = noised input, column j =
// condition): rewards from EMA predictions, row-wise PL weights, guidance
// deltas, tilted targets, (1/G^2) squared-residual loss. Pure in its inputs,
// so tests can drive it with preset vectors. Gradients are left to callers.
inline GroupLossResult agsm_grid_from_predictions(
    const std::vector<std::vector<Eigen::VectorXd>>& pred,
    const std::vector<std::vector<Eigen::VectorXd>>& ema_pred, const Eigen::VectorXd& eps,
    double A_t, double A_tilde_t, const GuidanceConfig& cfg, int t_diag = -1) {
  validate(cfg);
  const int G = int(pred.size());
  const int n = G * G;
  GroupLossResult out;
  PLTable& tab = out.table;
  tab.rewards.resize(G, G);
  tab.weights.resize(G, G);
  tab.pred = pred;
  tab.ema_pred = ema_pred;
  tab.delta.assign(G, std::vector<Eigen::VectorXd>(G));
  tab.target.assign(G, std::vector<Eigen::VectorXd>(G));

  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j)
      tab.rewards(i, j) = alignment_reward(A_t, ema_pred[i][j], eps);
  if (!tab.rewards.allFinite())
    detail::check_finite_loss(std::numeric_limits<double>::quiet_NaN(), t_diag, tab.rewards);

  for (int i = 0; i < G; ++i) {
    tab.weights.row(i) =
        pl_weights(tab.rewards.row(i).transpose() / cfg.pl_temperature).transpose();
    out.mean_pl_entropy += pl_entropy(tab.weights.row(i).transpose()) / double(G);
    for (int j = 0; j < G; ++j) {
      tab.delta[i][j] =
          guidance_delta(tab.ema_pred[i], tab.weights.row(i).transpose(), j);
      out.mean_delta_norm += tab.delta[i][j].norm() / double(n);
      tab.target[i][j] = target_noise(eps, tab.delta[i][j], i == j, cfg, A_tilde_t);
      Eigen::VectorXd resid = tab.pred[i][j] - tab.target[i][j];
      out.loss += resid.squaredNorm() / double(n);
      double denoise = (tab.pred[i][j] - eps).squaredNorm();
      if (i == j)
        out.pos_denoise += denoise / double(G);
      else if (G > 1)
        out.neg_denoise += denoise / double(n - G);
    }
  }
  detail::check_finite_loss(out.loss, t_diag, tab.rewards);
  return out;
}

// One full grid step: predictions with live tokens (psi+ on the diagonal,
// psi- off it), EMA predictions for rewards/deltas, tilted targets, and the
// (1/G^2) sum of squared residuals. Gradients flow only through the live
// predictions; positive pairs touch psi+ only, negative pairs psi- only.
inline GroupLossResult agsm_group_loss(const DenoiserParams& params, const SoftTokenBank& bank,
                                       const NoiseSchedule& sched, const GroupBatch& batch,
                                       const GuidanceConfig& cfg) {
  validate(cfg);
  const int G = batch.G;
  const Dims& dm = params.dims;
  const double time01 = double(batch.t) / double(sched.T);
  const int n = G * G;

  Eigen::MatrixXd in_live(dm.input_dim(), n), in_ema(dm.input_dim(), n);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      bool pos = i == j;
      int col = i * G + j;
      in_live.col(col) = assemble_input(params, batch.x_t[i], time01, batch.cond[j],
                                        pos ? &bank.psi_pos : &bank.psi_neg);
      in_ema.col(col) = assemble_input(params, batch.x_t[i], time01, batch.cond[j],
                                       pos ? &bank.ema_pos : &bank.ema_neg);
    }
  ForwardCache cache;
  Eigen::MatrixXd pred = forward_batch(params, in_live, &cache);
  Eigen::MatrixXd ema_pred = forward_batch(params, in_ema);

  std::vector<std::vector<Eigen::VectorXd>> pred_grid(G, std::vector<Eigen::VectorXd>(G));
  std::vector<std::vector<Eigen::VectorXd>> ema_grid(G, std::vector<Eigen::VectorXd>(G));
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      pred_grid[i][j] = pred.col(i * G + j);
      ema_grid[i][j] = ema_pred.col(i * G + j);
    }

  GroupLossResult out =
      agsm_grid_from_predictions(pred_grid, ema_grid, batch.eps, sched.A[batch.t],
                                 sched.A_tilde[batch.t], cfg, batch.t);

  Eigen::MatrixXd upstream(dm.d, n);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j)
      upstream.col(i * G + j) =
          (2.0 / double(n)) * (out.table.pred[i][j] - out.table.target[i][j]);
  Eigen::MatrixXd gin = backward_batch(params, cache, upstream);
  detail::TokenGradAccum acc(dm);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) acc.add(gin, i * G + j, i == j);
  out.grad_pos = acc.pos_grad();
  out.grad_neg = acc.neg_grad();
  return out;
}

// Bradley-Terry variant: per row, the listwise softmax is replaced by a
// two-candidate softmax of the positive against one sampled negative.
inline GroupLossResult bt_group_loss(const DenoiserParams& params, const SoftTokenBank& bank,
                                     const NoiseSchedule& sched, const GroupBatch& batch,
                                     const GuidanceConfig& cfg,
                                     const std::vector<int>& neg_choice) {
  validate(cfg);
  const int G = batch.G;
  if (G < 2) throw std::invalid_argument("pairwise loss needs at least two conditions");
  if (int(neg_choice.size()) != G) throw std::invalid_argument("one negative per row");
  for (int i = 0; i < G; ++i)
    if (neg_choice[i] < 0 || neg_choice[i] >= G || neg_choice[i] == i)
      throw std::invalid_argument("sampled negative must differ from the positive");

  const Dims& dm = params.dims;
  const double time01 = double(batch.t) / double(sched.T);
  const int n = 2 * G;  // candidate 0: j=i (positive); candidate 1: j=neg_choice[i]

  Eigen::MatrixXd in_live(dm.input_dim(), n), in_ema(dm.input_dim(), n);
  for (int i = 0; i < G; ++i)
    for (int a = 0; a < 2; ++a) {
      int j = a == 0 ? i : neg_choice[i];
      int col = 2 * i + a;
      in_live.col(col) = assemble_input(params, batch.x_t[i], time01, batch.cond[j],
                                        a == 0 ? &bank.psi_pos : &bank.psi_neg);
      in_ema.col(col) = assemble_input(params, batch.x_t[i], time01, batch.cond[j],
                                       a == 0 ? &bank.ema_pos : &bank.ema_neg);
    }
  ForwardCache cache;
  Eigen::MatrixXd pred = forward_batch(params, in_live, &cache);
  Eigen::MatrixXd ema_pred = forward_batch(params, in_ema);

  GroupLossResult out;
  PLTable& tab = out.table;
  tab.rewards.resize(G, 2);
  tab.weights.resize(G, 2);
  tab.pred.assign(G, std::vector<Eigen::VectorXd>(2));
  tab.ema_pred.assign(G, std::vector<Eigen::VectorXd>(2));
  tab.delta.assign(G, std::vector<Eigen::VectorXd>(2));
  tab.target.assign(G, std::vector<Eigen::VectorXd>(2));
  tab.bt_negative = neg_choice;

  for (int i = 0; i < G; ++i)
    for (int a = 0; a < 2; ++a) {
      int col = 2 * i + a;
      tab.pred[i][a] = pred.col(col);
      tab.ema_pred[i][a] = ema_pred.col(col);
      tab.rewards(i, a) =
          alignment_reward(sched, tab.ema_pred[i][a], batch.eps, batch.t);
    }
  if (!tab.rewards.allFinite())
    detail::check_finite_loss(std::numeric_limits<double>::quiet_NaN(), batch.t, tab.rewards);

  Eigen::MatrixXd upstream(dm.d, n);
  for (int i = 0; i < G; ++i) {
    tab.weights.row(i) =
        pl_weights(tab.rewards.row(i).transpose() / cfg.pl_temperature).transpose();
    out.mean_pl_entropy += pl_entropy(tab.weights.row(i).transpose()) / double(G);
    for (int a = 0; a < 2; ++a) {
      tab.delta[i][a] =
          guidance_delta(tab.ema_pred[i], tab.weights.row(i).transpose(), a);
      out.mean_delta_norm += tab.delta[i][a].norm() / double(n);
      tab.target[i][a] =
          target_noise(batch.eps, tab.delta[i][a], a == 0, cfg, sched.A_tilde[batch.t]);
      Eigen::VectorXd resid = tab.pred[i][a] - tab.target[i][a];
      out.loss += resid.squaredNorm() / double(n);
      upstream.col(2 * i + a) = (2.0 / double(n)) * resid;
      double denoise = (tab.pred[i][a] - batch.eps).squaredNorm();
      if (a == 0)
        out.pos_denoise += denoise / double(G);
      else
        out.neg_denoise += denoise / double(G);
    }
  }
  detail::check_finite_loss(out.loss, batch.t, tab.rewards);

  Eigen::MatrixXd gin = backward_batch(params, cache, upstream);
  detail::TokenGradAccum acc(dm);
  for (int i = 0; i < G; ++i)
    for (int a = 0; a < 2; ++a) acc.add(gin, 2 * i + a, a == 0);
  out.grad_pos = acc.pos_grad();
  out.grad_neg = acc.neg_grad();
  return out;
}

inline GroupLossResult bt_group_loss(const DenoiserParams& params, const SoftTokenBank& bank,
                                     const NoiseSchedule& sched, const GroupBatch& batch,
                                     const GuidanceConfig& cfg, std::mt19937_64& rng) {
  std::vector<int> neg(batch.G);
  std::uniform_int_distribution<int> pick(0, batch.G - 2);
  for (int i = 0; i < batch.G; ++i) {
    int j = pick(rng);
    neg[i] = j >= i ? j + 1 : j;
  }
  return bt_group_loss(params, bank, sched, batch, cfg, neg);
}

}  // namespace agsm
