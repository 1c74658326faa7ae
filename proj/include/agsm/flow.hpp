#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "agsm/agsm.hpp"
#include "agsm/data.hpp"
#include "agsm/denoiser.hpp"

namespace agsm {

// Linear-interpolant flow matching between data (t=0) and noise (t=1).
inline Eigen::VectorXd interpolate(const Eigen::VectorXd& x0, const Eigen::VectorXd& eps,
                                   double t) {
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("flow time must lie in [0,1]");
  return (1.0 - t) * x0 + t * eps;
}

inline Eigen::VectorXd velocity_target(const Eigen::VectorXd& x0, const Eigen::VectorXd& eps) {
  return eps - x0;
}

// Local-transition constants. The reward scale lambda and the guidance scale B
// are linked through the (absorbed) score-to-velocity factor K: B = K*lambda*
// delta_step/sigma2. Calibration picks K == 1 and lambda = sigma2/delta_step,
// which makes B = 1 in analogy to the diffusion-side unit guidance scale.
struct FlowConfig {
  double delta_step = 0.01;
  double sigma2 = 1.0;
  double lambda = 100.0;
  double B = 1.0;
};

inline FlowConfig calibrated_flow_config(double delta_step = 0.01, double sigma2 = 1.0) {
  FlowConfig cfg;
  cfg.delta_step = delta_step;
  cfg.sigma2 = sigma2;
  cfg.lambda = sigma2 / delta_step;
  cfg.B = 1.0;
  return cfg;
}

inline void validate(const FlowConfig& cfg) {
  if (!(cfg.delta_step > 0.0 && cfg.sigma2 > 0.0 && cfg.lambda > 0.0))
    throw std::invalid_argument("flow constants must be positive");
}

// Group grid for flow training: one real-valued t and one eps shared by all
// pairs, with states at both t and t + delta_step from the same interpolant.
struct FlowGroupBatch {
  int G = 0;
  std::vector<Eigen::VectorXd> x0;
  std::vector<int> cond;
  double t = 0.0;
  Eigen::VectorXd eps;
  std::vector<Eigen::VectorXd> x_t, x_t_plus;
};

inline FlowGroupBatch build_flow_group(const std::vector<LabeledPoint>& pairs,
                                       const FlowConfig& cfg, std::mt19937_64& rng) {
  if (pairs.empty()) throw std::invalid_argument("empty group");
  FlowGroupBatch g;
  g.G = int(pairs.size());
  for (const auto& [x, c] : pairs) {
    for (int prev : g.cond)
      if (prev == c) throw std::invalid_argument("duplicate condition in group");
    g.x0.push_back(x);
    g.cond.push_back(c);
  }
  std::uniform_real_distribution<double> pick_t(0.0, 1.0 - cfg.delta_step);
  g.t = pick_t(rng);
  g.eps = normal_vector(rng, int(g.x0[0].size()));
  for (const auto& x : g.x0) {
    g.x_t.push_back(interpolate(x, g.eps, g.t));
    g.x_t_plus.push_back(interpolate(x, g.eps, g.t + cfg.delta_step));
  }
  return g;
}

// Alignment reward under the flow model's local Gaussian transition: how well
// the EMA-token velocity at t+delta transports x_{t+delta} back onto x_t.
inline double flow_reward(const FlowConfig& cfg, const Eigen::VectorXd& x_t,
                          const Eigen::VectorXd& x_t_plus, const Eigen::VectorXd& v_ema) {
  Eigen::VectorXd mu = x_t_plus - cfg.delta_step * v_ema;
  return -0.5 * cfg.lambda / cfg.sigma2 * (x_t - mu).squaredNorm();
}

inline double flow_reward(const DenoiserParams& params, const Eigen::MatrixXd& ema_tokens,
                          const FlowConfig& cfg, const Eigen::VectorXd& x_t,
                          const Eigen::VectorXd& x_t_plus, double t, int c) {
  if (t + cfg.delta_step > 1.0 + 1e-12)
    throw std::invalid_argument("t + delta_step exceeds the flow horizon");
  Eigen::VectorXd v_ema =
      predict_time01(params, x_t_plus, t + cfg.delta_step, c, &ema_tokens);
  return flow_reward(cfg, x_t, x_t_plus, v_ema);
}

// Grid math on explicit velocity predictions; mirrors the diffusion grid with
// the substitutions {noise prediction -> velocity prediction, shared eps ->
// per-row velocity target u_i, A_tilde -> B}. Rewards keep their own local-
// transition form, evaluated from the states rather than from u.
inline GroupLossResult flow_grid_from_predictions(
    const std::vector<std::vector<Eigen::VectorXd>>& pred,
    const std::vector<std::vector<Eigen::VectorXd>>& v_ema,
    const std::vector<Eigen::VectorXd>& x_t, const std::vector<Eigen::VectorXd>& x_t_plus,
    const std::vector<Eigen::VectorXd>& u, const FlowConfig& fcfg,
    const GuidanceConfig& cfg, double t_diag = -1.0) {
  validate(fcfg);
  validate(cfg);
  const int G = int(pred.size());
  const int n = G * G;
  GroupLossResult out;
  PLTable& tab = out.table;
  tab.rewards.resize(G, G);
  tab.weights.resize(G, G);
  tab.pred = pred;
  tab.ema_pred = v_ema;
  tab.delta.assign(G, std::vector<Eigen::VectorXd>(G));
  tab.target.assign(G, std::vector<Eigen::VectorXd>(G));

  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j)
      tab.rewards(i, j) = flow_reward(fcfg, x_t[i], x_t_plus[i], v_ema[i][j]);
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
      tab.target[i][j] = target_noise(u[i], tab.delta[i][j], i == j, cfg, fcfg.B);
      Eigen::VectorXd resid = tab.pred[i][j] - tab.target[i][j];
      out.loss += resid.squaredNorm() / double(n);
      double vel_err = (tab.pred[i][j] - u[i]).squaredNorm();
      if (i == j)
        out.pos_denoise += vel_err / double(G);
      else if (G > 1)
        out.neg_denoise += vel_err / double(n - G);
    }
  }
  detail::check_finite_loss(out.loss, t_diag, tab.rewards);
  return out;
}

// Flow counterpart of the diffusion group loss: live velocity predictions at
// t (psi+ diagonal, psi- off it), EMA velocity predictions at t+delta for
// rewards and deltas, tilted velocity targets.
inline GroupLossResult flow_agsm_group_loss(const DenoiserParams& params,
                                            const SoftTokenBank& bank, const FlowConfig& fcfg,
                                            const FlowGroupBatch& batch,
                                            const GuidanceConfig& cfg) {
  validate(fcfg);
  validate(cfg);
  const int G = batch.G;
  const Dims& dm = params.dims;
  const int n = G * G;
  if (batch.t + fcfg.delta_step > 1.0 + 1e-12)
    throw std::invalid_argument("t + delta_step exceeds the flow horizon");

  Eigen::MatrixXd in_live(dm.input_dim(), n), in_ema(dm.input_dim(), n);
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      bool pos = i == j;
      int col = i * G + j;
      in_live.col(col) = assemble_input(params, batch.x_t[i], batch.t, batch.cond[j],
                                        pos ? &bank.psi_pos : &bank.psi_neg);
      in_ema.col(col) =
          assemble_input(params, batch.x_t_plus[i], batch.t + fcfg.delta_step,
                         batch.cond[j], pos ? &bank.ema_pos : &bank.ema_neg);
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
  std::vector<Eigen::VectorXd> u;
  for (int i = 0; i < G; ++i) u.push_back(velocity_target(batch.x0[i], batch.eps));

  GroupLossResult out = flow_grid_from_predictions(pred_grid, ema_grid, batch.x_t,
                                                   batch.x_t_plus, u, fcfg, cfg, batch.t);

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

// Velocity-regression pretraining on the linear interpolant (flow analog of
// the diffusion backbone pretraining).
template <typename Dataset>
PretrainResult pretrain_flow_backbone(const Dataset& data, const Dims& dims,
                                      const PretrainConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("empty dataset");
  PretrainResult out;
  out.params = init_denoiser(dims, seed);
  DenoiserParams& p = out.params;

  auto rng = substream(seed, "flow-pretrain");
  std::uniform_int_distribution<int> pick(0, int(data.size()) - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  struct Item {
    Eigen::VectorXd x_t, u;
    double t;
    std::optional<int> cond;
  };
  auto hrng = substream(seed, "flow-pretrain-heldout");
  std::vector<Item> heldout;
  {
    std::uniform_int_distribution<int> hpick(0, int(data.size()) - 1);
    std::uniform_real_distribution<double> hunif(0.0, 1.0);
    for (int i = 0; i < 256; ++i) {
      const auto& [x0, c] = data[hpick(hrng)];
      Item it;
      it.t = hunif(hrng);
      Eigen::VectorXd eps = normal_vector(hrng, dims.d);
      it.x_t = interpolate(x0, eps, it.t);
      it.u = velocity_target(x0, eps);
      it.cond = c;
      heldout.push_back(std::move(it));
    }
  }
  auto heldout_loss = [&]() {
    double s = 0.0;
    for (const auto& it : heldout)
      s += (predict_time01(p, it.x_t, it.t, it.cond, nullptr) - it.u).squaredNorm();
    return s / double(heldout.size());
  };
  out.heldout_loss_init = heldout_loss();

  Eigen::VectorXd theta = pack_params(p);
  AdamW opt;
  opt.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd in(dims.input_dim(), cfg.batch);
    Eigen::MatrixXd u(dims.d, cfg.batch);
    std::vector<std::optional<int>> conds(cfg.batch);
    for (int j = 0; j < cfg.batch; ++j) {
      const auto& [x0, c] = data[pick(rng)];
      double t = unif(rng);
      Eigen::VectorXd eps(dims.d);
      for (int k = 0; k < dims.d; ++k) eps[k] = gauss(rng);
      u.col(j) = velocity_target(x0, eps);
      if (unif(rng) >= cfg.p_uncond) conds[j] = c;
      in.col(j) = assemble_input(p, interpolate(x0, eps, t), t, conds[j], nullptr);
    }
    ForwardCache cache;
    Eigen::MatrixXd resid = forward_batch(p, in, &cache) - u;
    double loss = resid.squaredNorm() / double(cfg.batch);
    if (!std::isfinite(loss)) throw std::runtime_error("flow pretraining diverged (NaN loss)");
    ParamGrads g = zero_grads(p);
    Eigen::MatrixXd gin =
        backward_batch(p, cache, (2.0 / double(cfg.batch)) * resid, &g);
    for (int j = 0; j < cfg.batch; ++j) {
      Eigen::VectorXd ge = gin.col(j).segment(dims.d + dims.d_t, dims.d_e);
      if (conds[j])
        g.label_embed.row(*conds[j]) += ge.transpose();
      else
        g.null_embed += ge;
    }
    opt.step(theta, pack_grads(g));
    unpack_params(p, theta);
  }
  out.heldout_loss_final = heldout_loss();
  return out;
}

}  // namespace agsm
