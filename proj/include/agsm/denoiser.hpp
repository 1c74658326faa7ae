#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "agsm/optimizer.hpp"
#include "agsm/rng.hpp"
#include "agsm/schedule.hpp"

namespace agsm {

struct Dims {
  int d = 2;        // data dimension
  int d_t = 8;      // time embedding width (even)
  int d_e = 8;      // condition embedding width
  int d_s = 8;      // soft-token width
  int m = 4;        // tokens per polarity
  int K = 8;        // number of discrete conditions
  int hidden = 128;
  int layers = 3;

  int input_dim() const { return d + d_t + d_e + d_s; }
  int token_offset() const { return d + d_t + d_e; }
};

// MLP epsilon/velocity predictor. The backbone is frozen during post-training;
// only soft tokens move.
struct DenoiserParams {
  Dims dims;
  std::vector<Eigen::MatrixXd> W;  // layers hidden + 1 output
  std::vector<Eigen::VectorXd> b;
  Eigen::MatrixXd label_embed;  // K x d_e, one row per condition id
  Eigen::VectorXd null_embed;   // unconditional embedding
};

struct SoftTokenBank {
  Eigen::MatrixXd psi_pos, psi_neg;  // live tokens, m x d_s
  Eigen::MatrixXd ema_pos, ema_neg;  // EMA shadows
  double ema_decay = 0.999;
};

enum class Polarity { kPos, kNeg };

inline SoftTokenBank init_tokens(int m, int d_s, double std_dev = 0.02,
                                 std::uint64_t seed = 0, double ema_decay = 0.999) {
  if (m < 1 || std_dev < 0.0) throw std::invalid_argument("bad token config");
  auto rng = substream(seed, "tokens");
  SoftTokenBank bank;
  bank.psi_pos = normal_matrix(rng, m, d_s, std_dev);
  bank.psi_neg = normal_matrix(rng, m, d_s, std_dev);
  bank.ema_pos = bank.psi_pos;
  bank.ema_neg = bank.psi_neg;
  bank.ema_decay = ema_decay;
  return bank;
}

inline void ema_update(SoftTokenBank& bank, Polarity p) {
  double d = bank.ema_decay;
  if (p == Polarity::kPos)
    bank.ema_pos = d * bank.ema_pos + (1.0 - d) * bank.psi_pos;
  else
    bank.ema_neg = d * bank.ema_neg + (1.0 - d) * bank.psi_neg;
}

inline DenoiserParams init_denoiser(const Dims& dims, std::uint64_t seed) {
  DenoiserParams p;
  p.dims = dims;
  auto rng = substream(seed, "mlp-init");
  std::vector<int> widths;
  widths.push_back(dims.input_dim());
  for (int l = 0; l < dims.layers; ++l) widths.push_back(dims.hidden);
  widths.push_back(dims.d);
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    p.W.push_back(normal_matrix(rng, widths[l + 1], widths[l],
                                1.0 / std::sqrt(double(widths[l]))));
    p.b.push_back(Eigen::VectorXd::Zero(widths[l + 1]));
  }
  p.label_embed = normal_matrix(rng, dims.K, dims.d_e);
  p.null_embed = normal_vector(rng, dims.d_e);
  return p;
}

// Sinusoidal embedding of normalized time in [0, 1]: (sin, cos) pairs at
// frequencies pi * 2^k.
inline Eigen::VectorXd time_embedding(double time01, int d_t) {
  Eigen::VectorXd e(d_t);
  for (int k = 0; k < d_t / 2; ++k) {
    double w = M_PI * std::pow(2.0, double(k));
    e[2 * k] = std::sin(w * time01);
    e[2 * k + 1] = std::cos(w * time01);
  }
  return e;
}

// tokens == nullptr means "no tokens": the summary slot is zero, identical to
// passing an all-zero token matrix.
inline Eigen::VectorXd assemble_input(const DenoiserParams& p, const Eigen::VectorXd& x,
                                      double time01, std::optional<int> cond,
                                      const Eigen::MatrixXd* tokens) {
  const Dims& dm = p.dims;
  if (x.size() != dm.d) throw std::invalid_argument("x dimension mismatch");
  Eigen::VectorXd in = Eigen::VectorXd::Zero(dm.input_dim());
  in.head(dm.d) = x;
  in.segment(dm.d, dm.d_t) = time_embedding(time01, dm.d_t);
  if (cond.has_value()) {
    int c = cond.value_or(0);
    if (c < 0 || c >= dm.K) throw std::invalid_argument("unknown condition id");
    in.segment(dm.d + dm.d_t, dm.d_e) = p.label_embed.row(c).transpose();
  } else {
    in.segment(dm.d + dm.d_t, dm.d_e) = p.null_embed;
  }
  if (tokens) {
    if (tokens->cols() != dm.d_s) throw std::invalid_argument("token width mismatch");
    in.segment(dm.token_offset(), dm.d_s) = tokens->colwise().mean().transpose();
  }
  return in;
}

// Forward pass over a column batch of assembled inputs; h[l] holds the l-th
// hidden activation (tanh), needed for the backward pass.
struct ForwardCache {
  Eigen::MatrixXd in;
  std::vector<Eigen::MatrixXd> h;
};

inline Eigen::MatrixXd forward_batch(const DenoiserParams& p, const Eigen::MatrixXd& in,
                                     ForwardCache* cache = nullptr) {
  if (cache) {
    cache->in = in;
    cache->h.clear();
  }
  Eigen::MatrixXd h = in;
  for (int l = 0; l < p.dims.layers; ++l) {
    h = ((p.W[l] * h).colwise() + p.b[l]).array().tanh().matrix();
    if (cache) cache->h.push_back(h);
  }
  return (p.W.back() * h).colwise() + p.b.back();
}

struct ParamGrads {
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;
  Eigen::MatrixXd label_embed;
  Eigen::VectorXd null_embed;
};

inline ParamGrads zero_grads(const DenoiserParams& p) {
  ParamGrads g;
  for (const auto& w : p.W) g.W.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& bb : p.b) g.b.push_back(Eigen::VectorXd::Zero(bb.size()));
  g.label_embed = Eigen::MatrixXd::Zero(p.label_embed.rows(), p.label_embed.cols());
  g.null_embed = Eigen::VectorXd::Zero(p.null_embed.size());
  return g;
}

// Reverse pass for <upstream, output>, summed over batch columns. Returns the
// gradient with respect to the assembled inputs; when grads is non-null the
// weight/bias gradients are accumulated into it (embedding rows are routed by
// the caller, which knows each column's condition).
inline Eigen::MatrixXd backward_batch(const DenoiserParams& p, const ForwardCache& cache,
                                      const Eigen::MatrixXd& upstream,
                                      ParamGrads* grads = nullptr) {
  int L = p.dims.layers;
  Eigen::MatrixXd g = upstream;  // gradient wrt current layer output
  if (grads) {
    grads->W[L] += g * cache.h[L - 1].transpose();
    grads->b[L] += g.rowwise().sum();
  }
  g = p.W[L].transpose() * g;
  for (int l = L - 1; l >= 0; --l) {
    g = g.cwiseProduct((1.0 - cache.h[l].array().square()).matrix());
    const Eigen::MatrixXd& prev = l == 0 ? cache.in : cache.h[l - 1];
    if (grads) {
      grads->W[l] += g * prev.transpose();
      grads->b[l] += g.rowwise().sum();
    }
    g = p.W[l].transpose() * g;
  }
  return g;
}

inline Eigen::VectorXd predict_time01(const DenoiserParams& p, const Eigen::VectorXd& x,
                                      double time01, std::optional<int> cond,
                                      const Eigen::MatrixXd* tokens) {
  return forward_batch(p, assemble_input(p, x, time01, cond, tokens));
}

// Diffusion-side entry point: discrete t in [1, T], embedded as t/T.
inline Eigen::VectorXd predict(const DenoiserParams& p, const NoiseSchedule& sched,
                               const Eigen::VectorXd& x_t, int t, std::optional<int> cond,
                               const Eigen::MatrixXd* tokens) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("t out of range");
  return predict_time01(p, x_t, double(t) / double(sched.T), cond, tokens);
}

// Exact gradient of <upstream, predict(...)> with respect to the token matrix.
// The column-mean summary spreads the same cotangent row to every token.
inline Eigen::MatrixXd grad_wrt_tokens(const DenoiserParams& p, const Eigen::VectorXd& x,
                                       double time01, std::optional<int> cond,
                                       const Eigen::MatrixXd& tokens,
                                       const Eigen::VectorXd& upstream) {
  if (upstream.size() != p.dims.d) throw std::invalid_argument("upstream shape");
  ForwardCache cache;
  forward_batch(p, assemble_input(p, x, time01, cond, &tokens), &cache);
  Eigen::MatrixXd gin = backward_batch(p, cache, upstream);
  Eigen::RowVectorXd gsum =
      gin.col(0).segment(p.dims.token_offset(), p.dims.d_s).transpose() /
      double(tokens.rows());
  return gsum.replicate(tokens.rows(), 1);
}

// --- flat parameter packing (optimizer + checkpoints operate on this) ---

inline long param_count(const DenoiserParams& p) {
  long n = 0;
  for (const auto& w : p.W) n += w.size();
  for (const auto& bb : p.b) n += bb.size();
  return n + p.label_embed.size() + p.null_embed.size();
}

inline Eigen::VectorXd pack_params(const DenoiserParams& p) {
  Eigen::VectorXd v(param_count(p));
  long off = 0;
  auto put = [&](const double* src, long n) {
    std::copy(src, src + n, v.data() + off);
    off += n;
  };
  for (const auto& w : p.W) put(w.data(), w.size());
  for (const auto& bb : p.b) put(bb.data(), bb.size());
  put(p.label_embed.data(), p.label_embed.size());
  put(p.null_embed.data(), p.null_embed.size());
  return v;
}

inline void unpack_params(DenoiserParams& p, const Eigen::VectorXd& v) {
  long off = 0;
  auto take = [&](double* dst, long n) {
    std::copy(v.data() + off, v.data() + off + n, dst);
    off += n;
  };
  for (auto& w : p.W) take(w.data(), w.size());
  for (auto& bb : p.b) take(bb.data(), bb.size());
  take(p.label_embed.data(), p.label_embed.size());
  take(p.null_embed.data(), p.null_embed.size());
  if (off != v.size()) throw std::invalid_argument("param vector size mismatch");
}

inline Eigen::VectorXd pack_grads(const ParamGrads& g) {
  long n = 0;
  for (const auto& w : g.W) n += w.size();
  for (const auto& bb : g.b) n += bb.size();
  n += g.label_embed.size() + g.null_embed.size();
  Eigen::VectorXd v(n);
  long off = 0;
  auto put = [&](const double* src, long cnt) {
    std::copy(src, src + cnt, v.data() + off);
    off += cnt;
  };
  for (const auto& w : g.W) put(w.data(), w.size());
  for (const auto& bb : g.b) put(bb.data(), bb.size());
  put(g.label_embed.data(), g.label_embed.size());
  put(g.null_embed.data(), g.null_embed.size());
  return v;
}

// --- backbone pretraining: plain denoising score matching, no tokens ---

struct PretrainConfig {
  int steps = 4000;
  int batch = 128;
  double lr = 1e-3;
  double p_uncond = 0.1;  // condition dropout so CFG has a useful null branch
};

struct PretrainResult {
  DenoiserParams params;
  double heldout_loss_init = 0.0;
  double heldout_loss_final = 0.0;
};

template <typename Dataset>  // Dataset: vector of (VectorXd x0, int cond)
PretrainResult pretrain_backbone(const Dataset& data, const NoiseSchedule& sched,
                                 const Dims& dims, const PretrainConfig& cfg,
                                 std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("empty dataset");
  PretrainResult out;
  out.params = init_denoiser(dims, seed);
  DenoiserParams& p = out.params;

  auto rng = substream(seed, "pretrain");
  std::uniform_int_distribution<int> pick(0, int(data.size()) - 1);
  std::uniform_int_distribution<int> pick_t(1, sched.T);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Fixed held-out batch measures the pretraining postcondition.
  struct Item {
    Eigen::VectorXd x_t, eps;
    double time01;
    std::optional<int> cond;
  };
  auto heldout_rng = substream(seed, "pretrain-heldout");
  std::vector<Item> heldout;
  {
    std::uniform_int_distribution<int> hpick(0, int(data.size()) - 1);
    std::uniform_int_distribution<int> hpick_t(1, sched.T);
    for (int i = 0; i < 256; ++i) {
      const auto& [x0, c] = data[hpick(heldout_rng)];
      Item it;
      int t = hpick_t(heldout_rng);
      it.eps = normal_vector(heldout_rng, dims.d);
      it.x_t = forward_noise(sched, t, x0, it.eps);
      it.time01 = double(t) / sched.T;
      it.cond = c;
      heldout.push_back(std::move(it));
    }
  }
  auto heldout_loss = [&]() {
    double s = 0.0;
    for (const auto& it : heldout)
      s += (predict_time01(p, it.x_t, it.time01, it.cond, nullptr) - it.eps).squaredNorm();
    return s / double(heldout.size());
  };
  out.heldout_loss_init = heldout_loss();

  Eigen::VectorXd theta = pack_params(p);
  AdamW opt;
  opt.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd in(dims.input_dim(), cfg.batch);
    Eigen::MatrixXd eps(dims.d, cfg.batch);
    std::vector<std::optional<int>> conds(cfg.batch);
    for (int j = 0; j < cfg.batch; ++j) {
      const auto& [x0, c] = data[pick(rng)];
      int t = pick_t(rng);
      for (int k = 0; k < dims.d; ++k) eps(k, j) = gauss(rng);
      Eigen::VectorXd x_t = forward_noise(sched, t, x0, eps.col(j));
      if (unif(rng) >= cfg.p_uncond) conds[j] = c;
      in.col(j) = assemble_input(p, x_t, double(t) / sched.T, conds[j], nullptr);
    }
    ForwardCache cache;
    Eigen::MatrixXd pred = forward_batch(p, in, &cache);
    Eigen::MatrixXd resid = pred - eps;
    double loss = resid.squaredNorm() / double(cfg.batch);
    if (!std::isfinite(loss)) throw std::runtime_error("pretraining diverged (NaN loss)");
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
