#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "agsm/denoiser.hpp"
#include "agsm/rng.hpp"
#include "agsm/schedule.hpp"

namespace agsm {

// Which soft tokens feed the conditional / unconditional halves of the
// classifier-free prediction. kPosOnly drops the negative tokens entirely;
// kPosCondNegUncond routes them into the unconditional branch; kNoTokens
// samples from the bare backbone.
enum class SampleStrategy { kPosOnly, kPosCondNegUncond, kNoTokens };

inline const char* strategy_name(SampleStrategy s) {
  switch (s) {
    case SampleStrategy::kPosOnly: return "pos-only";
    case SampleStrategy::kPosCondNegUncond: return "pos-cond-neg-uncond";
    case SampleStrategy::kNoTokens: return "no-tokens";
  }
  return "?";
}

inline SampleStrategy parse_strategy(const std::string& name) {
  if (name == "pos-only") return SampleStrategy::kPosOnly;
  if (name == "pos-cond-neg-uncond") return SampleStrategy::kPosCondNegUncond;
  if (name == "no-tokens") return SampleStrategy::kNoTokens;
  throw std::invalid_argument("unknown sampling strategy: " + name);
}

namespace detail {

inline void strategy_tokens(const SoftTokenBank& bank, SampleStrategy s,
                            const Eigen::MatrixXd*& cond_tok,
                            const Eigen::MatrixXd*& uncond_tok) {
  switch (s) {
    case SampleStrategy::kPosOnly:
      cond_tok = &bank.psi_pos;
      uncond_tok = &bank.psi_pos;
      break;
    case SampleStrategy::kPosCondNegUncond:
      cond_tok = &bank.psi_pos;
      uncond_tok = &bank.psi_neg;
      break;
    case SampleStrategy::kNoTokens:
      cond_tok = nullptr;
      uncond_tok = nullptr;
      break;
  }
}

// Column-batched assemble_input for chains that share time, condition, and
// tokens; only the state differs per column.
inline Eigen::MatrixXd assemble_shared(const DenoiserParams& p, const Eigen::MatrixXd& X,
                                       double time01, std::optional<int> cond,
                                       const Eigen::MatrixXd* tokens) {
  const Dims& dm = p.dims;
  if (X.rows() != dm.d) throw std::invalid_argument("state dimension mismatch");
  Eigen::MatrixXd in = Eigen::MatrixXd::Zero(dm.input_dim(), X.cols());
  in.topRows(dm.d) = X;
  in.middleRows(dm.d, dm.d_t).colwise() = time_embedding(time01, dm.d_t);
  if (cond.has_value()) {
    int c = cond.value_or(0);
    if (c < 0 || c >= dm.K) throw std::invalid_argument("unknown condition id");
    in.middleRows(dm.d + dm.d_t, dm.d_e).colwise() = Eigen::VectorXd(p.label_embed.row(c));
  } else {
    in.middleRows(dm.d + dm.d_t, dm.d_e).colwise() = p.null_embed;
  }
  if (tokens) {
    if (tokens->cols() != dm.d_s) throw std::invalid_argument("token width mismatch");
    in.middleRows(dm.token_offset(), dm.d_s).colwise() =
        Eigen::VectorXd(tokens->colwise().mean());
  }
  return in;
}

}  // namespace detail

// Classifier-free prediction uncond + scale*(cond - uncond) over a column
// batch; time01 is t/T for the noise parameterization or real t for flows.
inline Eigen::MatrixXd cfg_predict_batch(const DenoiserParams& p, const SoftTokenBank& bank,
                                         const Eigen::MatrixXd& X, double time01, int c,
                                         double scale, SampleStrategy strategy) {
  if (!(scale >= 0.0)) throw std::invalid_argument("cfg scale must be >= 0");
  const Eigen::MatrixXd* cond_tok = nullptr;
  const Eigen::MatrixXd* uncond_tok = nullptr;
  detail::strategy_tokens(bank, strategy, cond_tok, uncond_tok);
  // The endpoints collapse to a single branch; skip the unused forward pass.
  if (scale == 1.0) return forward_batch(p, detail::assemble_shared(p, X, time01, c, cond_tok));
  Eigen::MatrixXd uncond_pred =
      forward_batch(p, detail::assemble_shared(p, X, time01, std::nullopt, uncond_tok));
  if (scale == 0.0) return uncond_pred;
  Eigen::MatrixXd cond_pred =
      forward_batch(p, detail::assemble_shared(p, X, time01, c, cond_tok));
  return uncond_pred + scale * (cond_pred - uncond_pred);
}

inline Eigen::VectorXd cfg_predict(const DenoiserParams& p, const SoftTokenBank& bank,
                                   const NoiseSchedule& sched, const Eigen::VectorXd& x_t,
                                   int t, int c, double scale, SampleStrategy strategy) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("t out of range");
  return cfg_predict_batch(p, bank, x_t, double(t) / double(sched.T), c, scale, strategy);
}

inline Eigen::VectorXd cfg_predict_time01(const DenoiserParams& p, const SoftTokenBank& bank,
                                          const Eigen::VectorXd& x_t, double time01, int c,
                                          double scale, SampleStrategy strategy) {
  if (time01 < 0.0 || time01 > 1.0) throw std::invalid_argument("time01 out of range");
  return cfg_predict_batch(p, bank, x_t, time01, c, scale, strategy);
}

// Ancestral reverse process. predict_eps(X, t) maps a d x n column batch of
// states to noise predictions. Noise streams are keyed by (seed, chain, step)
// so different strategies and predictors see common random numbers.
template <class PredFn>
std::vector<Eigen::VectorXd> ddpm_sample_with(PredFn&& predict_eps, const NoiseSchedule& sched,
                                              int d, int n, std::uint64_t seed) {
  std::vector<Eigen::VectorXd> out;
  if (n <= 0) return out;
  Eigen::MatrixXd X(d, n);
  for (int j = 0; j < n; ++j) {
    auto rng = substream(seed, "ddpm-init", std::uint64_t(j));
    X.col(j) = normal_vector(rng, d);
  }
  for (int t = sched.T; t >= 1; --t) {
    Eigen::MatrixXd eps_hat = predict_eps(X, t);
    double coef = sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]);
    X = (X - coef * eps_hat) / std::sqrt(sched.alpha[t]);
    if (t > 1) {
      double sd = std::sqrt(sched.posterior_var[t]);
      for (int j = 0; j < n; ++j) {
        auto rng = substream(seed, "ddpm-noise", std::uint64_t(j), std::uint64_t(t));
        X.col(j) += sd * normal_vector(rng, d);
      }
    }
  }
  out.reserve(n);
  for (int j = 0; j < n; ++j) out.push_back(X.col(j));
  return out;
}

inline std::vector<Eigen::VectorXd> ddpm_sample(const DenoiserParams& p,
                                                const SoftTokenBank& bank,
                                                const NoiseSchedule& sched, int c, int n,
                                                double scale, SampleStrategy strategy,
                                                std::uint64_t seed) {
  return ddpm_sample_with(
      [&](const Eigen::MatrixXd& X, int t) {
        return cfg_predict_batch(p, bank, X, double(t) / double(sched.T), c, scale, strategy);
      },
      sched, p.dims.d, n, seed);
}

// Euler integration of dx/dt = v from t=1 (noise) down to t=0 (data).
// velocity(X, t) maps a d x n column batch to velocities at time t.
template <class VelFn>
std::vector<Eigen::VectorXd> flow_sample_with(VelFn&& velocity, int d, int n, int steps,
                                              std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("flow sampling needs steps >= 1");
  std::vector<Eigen::VectorXd> out;
  if (n <= 0) return out;
  Eigen::MatrixXd X(d, n);
  for (int j = 0; j < n; ++j) {
    auto rng = substream(seed, "flow-init", std::uint64_t(j));
    X.col(j) = normal_vector(rng, d);
  }
  const double dt = 1.0 / double(steps);
  for (int k = 0; k < steps; ++k) {
    double t = 1.0 - double(k) * dt;
    X -= dt * velocity(X, t);
  }
  out.reserve(n);
  for (int j = 0; j < n; ++j) out.push_back(X.col(j));
  return out;
}

inline std::vector<Eigen::VectorXd> flow_sample(const DenoiserParams& p,
                                                const SoftTokenBank& bank, int c, int n,
                                                int steps, double scale,
                                                SampleStrategy strategy, std::uint64_t seed) {
  return flow_sample_with(
      [&](const Eigen::MatrixXd& X, double t) {
        return cfg_predict_batch(p, bank, X, t, c, scale, strategy);
      },
      p.dims.d, n, steps, seed);
}

}  // namespace agsm
